//! Central-difference checks for analytic gradients.

use crate::encoder::FrozenEncoder;
use crate::error::Result;
use crate::math::dot;
use crate::rng::{gaussian_vec, stream, Domain};

/// Step used by every check in this crate.
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on [`relative_error`].
pub const FD_TOLERANCE: f64 = 1e-5;

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            x[i] = point[i] + h;
            let up = f(&x);
            x[i] = point[i] - h;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// max |a - n| divided by the largest magnitude in either gradient.
/// Two all-zero gradients compare as 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

pub type VjpFn = dyn Fn(&FrozenEncoder, &[Vec<f64>], &[f64]) -> Result<Vec<Vec<f64>>>;

/// Checks [`FrozenEncoder::encode_vjp`] on ten random token sets.
pub fn gradcheck(enc: &FrozenEncoder, seed: u64) -> Result<GradcheckReport> {
    check_vjp_with(enc, seed, 10, &|e, t, u| e.encode_vjp(t, u))
}

/// Compares `vjp` against central differences of `upstream · encode(tokens)`.
pub fn check_vjp_with(
    enc: &FrozenEncoder,
    seed: u64,
    probes: usize,
    vjp: &VjpFn,
) -> Result<GradcheckReport> {
    let dt = enc.token_dim();
    let slots = enc.context_len() + 1;
    let mut worst: f64 = 0.0;
    for probe in 0..probes {
        let mut rng = stream(seed, Domain::Probe, probe as u64);
        let flat = gaussian_vec(&mut rng, slots * dt, 1.0);
        let upstream = gaussian_vec(&mut rng, enc.feature_dim(), 1.0);
        let tokens: Vec<Vec<f64>> = flat.chunks(dt).map(<[f64]>::to_vec).collect();
        let analytic: Vec<f64> = vjp(enc, &tokens, &upstream)?.concat();
        let numeric = central_difference(
            |x| {
                let t: Vec<&[f64]> = x.chunks(dt).collect();
                enc.encode(&t)
                    .map(|f| dot(&f, &upstream))
                    .unwrap_or(f64::NAN)
            },
            &flat,
            FD_STEP,
        );
        let err = relative_error(&analytic, &numeric);
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        probes,
        passed: worst < FD_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderKind, EncoderSpec};

    #[test]
    fn quadratic_difference() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, 1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_zero_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.5, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn both_kinds_pass() {
        for kind in [EncoderKind::LinearMean, EncoderKind::TanhMlp] {
            let spec = EncoderSpec {
                kind,
                context_len: 3,
                ..EncoderSpec::default()
            };
            let enc = FrozenEncoder::seeded(spec, 0).unwrap();
            let report = gradcheck(&enc, 0).unwrap();
            assert!(report.passed, "{kind}: {report:?}");
            assert_eq!(report.probes, 10);
        }
    }

    #[test]
    fn sign_flipped_vjp_fails() {
        let enc = FrozenEncoder::seeded(EncoderSpec::default(), 1).unwrap();
        let flipped = |e: &FrozenEncoder, t: &[Vec<f64>], u: &[f64]| {
            let mut g = e.encode_vjp(t, u)?;
            g[0].iter_mut().for_each(|x| *x = -*x);
            Ok(g)
        };
        let report = check_vjp_with(&enc, 0, 10, &flipped).unwrap();
        assert!(!report.passed);
    }
}
