//! Loss values and their gradients at the logit or feature level.
//!
//! Logit inputs are already divided by the temperature.

use crate::error::{Error, Result};
use crate::math::{dot, log_sum_exp, softmax_unchecked};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            gamma: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "loss weights",
                    format!("{what} must be >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Coefficients on the three negative-prompt terms. `LossWeights` maps to
/// `(1, beta, gamma)`; other settings isolate single terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub nis: f64,
    pub npd: f64,
    pub nnd: f64,
}

impl From<LossWeights> for TermWeights {
    fn from(w: LossWeights) -> Self {
        TermWeights {
            nis: 1.0,
            npd: w.beta,
            nnd: w.gamma,
        }
    }
}

/// nis + beta·npd + gamma·nnd
pub fn combine(nis: f64, npd: f64, nnd: f64, weights: LossWeights) -> f64 {
    nis + weights.beta * npd + weights.gamma * nnd
}

fn check_rows(rows: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let width = rows.first().ok_or(Error::Empty(what))?.len();
    if width == 0 {
        return Err(Error::Empty(what));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::DimensionMismatch {
            what,
            expected: width,
            got: r.len(),
        });
    }
    Ok(width)
}

/// Mean cross-entropy of softmax(logits) against `labels`.
/// Gradient rows are (softmax − one_hot) / batch.
pub fn positive_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_rows(logits, "positive logits")?;
    if labels.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: logits.len(),
            got: labels.len(),
        });
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        loss += log_sum_exp(row) - row[y];
        let mut g = softmax_unchecked(row);
        g[y] -= 1.0;
        g.iter_mut().for_each(|x| *x /= b);
        grads.push(g);
    }
    Ok((loss / b, grads))
}

/// Per-image gradients with respect to a batch of logit rows.
pub type LogitGrads = Vec<Vec<f64>>;

/// Cross-entropy where the normalizer also runs over the negative logits.
/// Returns (loss, gradient on positive logits, gradient on negative logits).
pub fn augmented_positive_loss(
    pos_logits: &[Vec<f64>],
    neg_logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, LogitGrads, LogitGrads)> {
    let k = check_rows(pos_logits, "positive logits")?;
    if neg_logits.len() != pos_logits.len() || labels.len() != pos_logits.len() {
        return Err(Error::DimensionMismatch {
            what: "batch",
            expected: pos_logits.len(),
            got: neg_logits.len().min(labels.len()),
        });
    }
    let b = pos_logits.len() as f64;
    let mut loss = 0.0;
    let mut gp = Vec::with_capacity(pos_logits.len());
    let mut gn = Vec::with_capacity(pos_logits.len());
    for ((sp, sn), &y) in pos_logits.iter().zip(neg_logits).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let joint: Vec<f64> = sp.iter().chain(sn).copied().collect();
        loss += log_sum_exp(&joint) - sp[y];
        let mut g = softmax_unchecked(&joint);
        g[y] -= 1.0;
        g.iter_mut().for_each(|x| *x /= b);
        gn.push(g.split_off(k));
        gp.push(g);
    }
    Ok((loss / b, gp, gn))
}

/// Cross-entropy between the uniform distribution and softmax over the
/// negative logits only, averaged over the batch.
pub fn nis_loss(neg_logits: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = check_rows(neg_logits, "negative logits")?;
    let b = neg_logits.len() as f64;
    let u = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(neg_logits.len());
    for row in neg_logits {
        let lse = log_sum_exp(row);
        loss += lse - row.iter().sum::<f64>() * u;
        let g = softmax_unchecked(row).iter().map(|f| (f - u) / b).collect();
        grads.push(g);
    }
    Ok((loss / b, grads))
}

fn check_neg_shape(neg: &[Vec<Vec<f64>>], k: Option<usize>) -> Result<(usize, usize)> {
    let p = neg.len();
    let k_neg = neg.first().ok_or(Error::Empty("negative features"))?.len();
    if k_neg == 0 {
        return Err(Error::Empty("negative features"));
    }
    if let Some(k) = k {
        if k != k_neg {
            return Err(Error::DimensionMismatch {
                what: "negative classes",
                expected: k,
                got: k_neg,
            });
        }
    }
    let d = neg[0][0].len();
    for per_prompt in neg {
        if per_prompt.len() != k_neg {
            return Err(Error::DimensionMismatch {
                what: "negative classes",
                expected: k_neg,
                got: per_prompt.len(),
            });
        }
        if let Some(f) = per_prompt.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "negative feature",
                expected: d,
                got: f.len(),
            });
        }
    }
    Ok((p, k_neg))
}

/// −(1/(kp)) Σ_j Σ_i cos(neg[i][j], pos[j]). Gradient is with respect to the
/// negative features; positives are treated as constants.
pub fn npd_loss(neg: &[Vec<Vec<f64>>], pos: &[Vec<f64>]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let (p, k) = check_neg_shape(neg, Some(pos.len()))?;
    if pos.iter().any(|f| f.len() != neg[0][0].len()) {
        return Err(Error::DimensionMismatch {
            what: "positive feature",
            expected: neg[0][0].len(),
            got: pos[0].len(),
        });
    }
    let c = 1.0 / (k * p) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(p);
    for per_prompt in neg {
        let mut g = Vec::with_capacity(k);
        for (n, t) in per_prompt.iter().zip(pos) {
            loss -= c * dot(n, t);
            g.push(t.iter().map(|x| -c * x).collect());
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Gradient of the npd term with respect to the positive features.
pub fn npd_positive_grad(neg: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let p = neg.len();
    let k = neg[0].len();
    let c = 1.0 / (k * p) as f64;
    (0..k)
        .map(|j| {
            let mut g = vec![0.0; neg[0][j].len()];
            for per_prompt in neg {
                crate::math::axpy(&mut g, -c, &per_prompt[j]);
            }
            g
        })
        .collect()
}

/// (1/(k·p·(p−1))) Σ_j Σ_i Σ_{l≠i} cos(neg[i][j], neg[l][j]); zero when p = 1.
pub fn nnd_loss(neg: &[Vec<Vec<f64>>]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let (p, k) = check_neg_shape(neg, None)?;
    let d = neg[0][0].len();
    let mut grads = vec![vec![vec![0.0; d]; k]; p];
    if p == 1 {
        return Ok((0.0, grads));
    }
    let c = 1.0 / (k * p * (p - 1)) as f64;
    let mut loss = 0.0;
    for j in 0..k {
        for i in 0..p {
            for l in 0..p {
                if l == i {
                    continue;
                }
                loss += c * dot(&neg[i][j], &neg[l][j]);
                crate::math::axpy(&mut grads[i][j], 2.0 * c, &neg[l][j]);
            }
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_loss_symmetry_and_limit() {
        let (l, _) = positive_loss(&[vec![0.3, 0.3]], &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = positive_loss(&[vec![50.0, 0.0]], &[0]).unwrap();
        assert!(l < 1e-20);
        assert!(positive_loss(&[vec![0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn nis_single_entry_is_zero() {
        let (l, g) = nis_loss(&[vec![3.0]]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![vec![0.0]]);
        assert!(nis_loss(&[]).is_err());
    }

    #[test]
    fn npd_mean_of_two() {
        let pos = vec![vec![1.0, 0.0]];
        let neg = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let (l, _) = npd_loss(&neg, &pos).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
    }

    #[test]
    fn nnd_single_prompt_is_zero() {
        let neg = vec![vec![vec![0.6, 0.8], vec![1.0, 0.0]]];
        let (l, g) = nnd_loss(&neg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn combine_example() {
        let v = combine(1.0, -0.5, 0.3, LossWeights::default());
        assert!((v - 0.965).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            beta: -1.0,
            gamma: 0.0,
        };
        assert!(w.validate().unwrap_err().to_string().contains("beta"));
    }
}
