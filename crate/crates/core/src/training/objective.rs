//! Token-level objectives: losses chained through the frozen encoder back to
//! the context tokens.

use crate::encoder::{Activation, FrozenEncoder};
use crate::error::{Error, Result};
use crate::math::{axpy, dot};
use crate::world::{ClassVocabulary, World};

use super::losses::{
    augmented_positive_loss, nis_loss, nnd_loss, npd_loss, npd_positive_grad, positive_loss,
    LossWeights, TermWeights,
};

/// Training images paired with the class tokens they are labeled by.
/// Labels index `class_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub class_names: Vec<String>,
    pub class_tokens: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    /// ID training records whose class is in `classes` (vocabulary indices).
    pub fn from_world(world: &World, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Empty("training classes"));
        }
        let vocab = &world.vocab;
        let mut class_names = Vec::with_capacity(classes.len());
        let mut class_tokens = Vec::with_capacity(classes.len());
        for &c in classes {
            let e = vocab.entries().get(c).ok_or(Error::LabelOutOfRange {
                label: c,
                classes: vocab.len(),
            })?;
            if !e.is_id {
                return Err(Error::invalid(
                    "training classes",
                    format!("`{}` is not an ID class", e.name),
                ));
            }
            class_names.push(e.name.clone());
            class_tokens.push(e.token.clone());
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, f) in world.id_train.features().iter().enumerate() {
            let name = world.id_train.label_name(i);
            if let Some(pos) = class_names.iter().position(|n| n == name) {
                features.push(f.clone());
                labels.push(pos);
            }
        }
        if features.is_empty() {
            return Err(Error::Empty("training records"));
        }
        Ok(TrainingSet {
            class_names,
            class_tokens,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// The first `round(fraction · k)` ID classes (at least one), vocabulary order.
pub fn leading_id_classes(vocab: &ClassVocabulary, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "class fraction",
            format!("{fraction} is outside (0, 1]"),
        ));
    }
    let ids = vocab.id_classes();
    if ids.is_empty() {
        return Err(Error::Empty("ID classes"));
    }
    let keep = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
    Ok(ids[..keep].to_vec())
}

/// Per-term loss values. Terms absent from a stage are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub nis: Option<f64>,
    pub npd: Option<f64>,
    pub nnd: Option<f64>,
    pub positive: Option<f64>,
}

/// Encoder outputs of one context paired with every class token.
pub struct ClassPass {
    pub features: Vec<Vec<f64>>,
    acts: Vec<Activation>,
}

pub fn encode_classes(
    enc: &FrozenEncoder,
    context: &[Vec<f64>],
    class_tokens: &[Vec<f64>],
) -> Result<ClassPass> {
    if context.len() != enc.context_len() {
        return Err(Error::DimensionMismatch {
            what: "context length",
            expected: enc.context_len(),
            got: context.len(),
        });
    }
    if let Some(t) = context
        .iter()
        .chain(class_tokens)
        .find(|t| t.len() != enc.token_dim())
    {
        return Err(Error::DimensionMismatch {
            what: "token dim",
            expected: enc.token_dim(),
            got: t.len(),
        });
    }
    let base = enc.pool_context(context);
    let wc = enc.class_slot_weight();
    let acts = class_tokens
        .iter()
        .map(|c| {
            let mut pooled = base.clone();
            axpy(&mut pooled, wc, c);
            enc.forward_pooled(&pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassPass {
        features: acts.iter().map(|a| a.feature.clone()).collect(),
        acts,
    })
}

/// Pulls per-class feature gradients back to the context tokens.
fn context_grad(
    enc: &FrozenEncoder,
    pass: &ClassPass,
    feature_grads: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut g_pool = vec![0.0; enc.token_dim()];
    for (act, g) in pass.acts.iter().zip(feature_grads) {
        let gp = enc.backward_pooled(act, g);
        axpy(&mut g_pool, 1.0, &gp);
    }
    (0..enc.context_len())
        .map(|s| {
            let w = enc.slot_weight(s);
            g_pool.iter().map(|x| w * x).collect()
        })
        .collect()
}

fn logits(
    data: &TrainingSet,
    batch: &[usize],
    class_features: &[&[f64]],
    tau: f64,
) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|&i| {
            class_features
                .iter()
                .map(|t| dot(&data.features[i], t) / tau)
                .collect()
        })
        .collect()
}

/// Σ_b g[b][j] · x_b / τ for every column j.
fn logit_to_feature_grads(
    data: &TrainingSet,
    batch: &[usize],
    g: &[Vec<f64>],
    tau: f64,
) -> Vec<Vec<f64>> {
    let m = g.first().map_or(0, Vec::len);
    let d = data.features[0].len();
    let mut out = vec![vec![0.0; d]; m];
    for (row, &i) in g.iter().zip(batch) {
        for (o, gv) in out.iter_mut().zip(row) {
            axpy(o, gv / tau, &data.features[i]);
        }
    }
    out
}

fn check_batch(data: &TrainingSet, batch: &[usize], tau: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::LabelOutOfRange {
            label: i,
            classes: data.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", "must be > 0"));
    }
    Ok(())
}

/// Gradient of a loss with respect to one context, one row per token.
pub type TokenGrads = Vec<Vec<f64>>;

/// Cross-entropy over the positive logits; gradient on the positive context.
pub fn positive_objective(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    batch: &[usize],
    context: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, TokenGrads)> {
    check_batch(data, batch, tau)?;
    let pass = encode_classes(enc, context, &data.class_tokens)?;
    let feats: Vec<&[f64]> = pass.features.iter().map(Vec::as_slice).collect();
    let s = logits(data, batch, &feats, tau);
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let (loss, g) = positive_loss(&s, &labels)?;
    let fg = logit_to_feature_grads(data, batch, &g, tau);
    Ok((loss, context_grad(enc, &pass, &fg)))
}

struct NegativeState {
    passes: Vec<ClassPass>,
    /// p × k features
    features: Vec<Vec<Vec<f64>>>,
}

fn encode_negatives(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    negatives: &[Vec<Vec<f64>>],
) -> Result<NegativeState> {
    if negatives.is_empty() {
        return Err(Error::Empty("negative prompts"));
    }
    let passes = negatives
        .iter()
        .map(|ctx| encode_classes(enc, ctx, &data.class_tokens))
        .collect::<Result<Vec<_>>>()?;
    let features = passes.iter().map(|p| p.features.clone()).collect();
    Ok(NegativeState { passes, features })
}

/// Adds the weighted negative terms. `neg_logit_grad` carries any gradient
/// already accumulated on the negative logits. Returns per-feature gradients
/// for the negatives and, via `pos_feature_grad`, the npd pull on positives.
#[allow(clippy::too_many_arguments)]
fn negative_terms(
    data: &TrainingSet,
    batch: &[usize],
    pos_features: &[Vec<f64>],
    state: &NegativeState,
    neg_logits: &[Vec<f64>],
    mut neg_logit_grad: Vec<Vec<f64>>,
    tau: f64,
    terms: TermWeights,
    breakdown: &mut LossBreakdown,
    pos_feature_grad: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = data.num_classes();
    let (nis, g_nis) = nis_loss(neg_logits)?;
    for (acc, g) in neg_logit_grad.iter_mut().zip(&g_nis) {
        axpy(acc, terms.nis, g);
    }
    let flat = logit_to_feature_grads(data, batch, &neg_logit_grad, tau);
    let mut grads: Vec<Vec<Vec<f64>>> = flat.chunks(k).map(<[Vec<f64>]>::to_vec).collect();
    let (npd, g_npd) = npd_loss(&state.features, pos_features)?;
    let (nnd, g_nnd) = nnd_loss(&state.features)?;
    for (l, per_prompt) in grads.iter_mut().enumerate() {
        for (j, g) in per_prompt.iter_mut().enumerate() {
            axpy(g, terms.npd, &g_npd[l][j]);
            axpy(g, terms.nnd, &g_nnd[l][j]);
        }
    }
    if let Some(pg) = pos_feature_grad {
        for (acc, g) in pg.iter_mut().zip(npd_positive_grad(&state.features)) {
            axpy(acc, terms.npd, &g);
        }
    }
    breakdown.total += terms.nis * nis + terms.npd * npd + terms.nnd * nnd;
    breakdown.nis = Some(nis);
    breakdown.npd = Some(npd);
    breakdown.nnd = Some(nnd);
    Ok(grads)
}

fn negative_logits(
    data: &TrainingSet,
    batch: &[usize],
    state: &NegativeState,
    tau: f64,
) -> Vec<Vec<f64>> {
    let flat: Vec<&[f64]> = state.features.iter().flatten().map(Vec::as_slice).collect();
    logits(data, batch, &flat, tau)
}

/// Weighted nis/npd/nnd objective on the negative contexts with the positive
/// features held fixed. Returns one token-gradient block per negative context.
pub fn negative_objective(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    batch: &[usize],
    pos_features: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
    tau: f64,
    terms: TermWeights,
) -> Result<(LossBreakdown, Vec<TokenGrads>)> {
    check_batch(data, batch, tau)?;
    let state = encode_negatives(enc, data, negatives)?;
    let s_neg = negative_logits(data, batch, &state, tau);
    let zero = vec![vec![0.0; s_neg[0].len()]; s_neg.len()];
    let mut breakdown = LossBreakdown::default();
    let fg = negative_terms(
        data,
        batch,
        pos_features,
        &state,
        &s_neg,
        zero,
        tau,
        terms,
        &mut breakdown,
        None,
    )?;
    let grads = state
        .passes
        .iter()
        .zip(&fg)
        .map(|(pass, g)| context_grad(enc, pass, g))
        .collect();
    Ok((breakdown, grads))
}

/// Cross-entropy over the negative-augmented probabilities plus the weighted
/// negative terms, differentiated with respect to all contexts at once.
/// Returns (breakdown, positive token grads, negative token grads).
pub fn joint_objective(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    batch: &[usize],
    positive: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
    tau: f64,
    weights: LossWeights,
) -> Result<(LossBreakdown, TokenGrads, Vec<TokenGrads>)> {
    check_batch(data, batch, tau)?;
    let pos_pass = encode_classes(enc, positive, &data.class_tokens)?;
    let state = encode_negatives(enc, data, negatives)?;
    let pos_feats: Vec<&[f64]> = pos_pass.features.iter().map(Vec::as_slice).collect();
    let s_pos = logits(data, batch, &pos_feats, tau);
    let s_neg = negative_logits(data, batch, &state, tau);
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let (ce, g_pos, g_neg) = augmented_positive_loss(&s_pos, &s_neg, &labels)?;
    let mut breakdown = LossBreakdown {
        total: ce,
        positive: Some(ce),
        ..LossBreakdown::default()
    };
    let mut pos_fg = logit_to_feature_grads(data, batch, &g_pos, tau);
    let neg_fg = negative_terms(
        data,
        batch,
        &pos_pass.features,
        &state,
        &s_neg,
        g_neg,
        tau,
        weights.into(),
        &mut breakdown,
        Some(&mut pos_fg),
    )?;
    let pos_grad = context_grad(enc, &pos_pass, &pos_fg);
    let neg_grads = state
        .passes
        .iter()
        .zip(&neg_fg)
        .map(|(pass, g)| context_grad(enc, pass, g))
        .collect();
    Ok((breakdown, pos_grad, neg_grads))
}
