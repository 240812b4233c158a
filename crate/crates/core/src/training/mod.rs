//! Prompt optimization: positive stage, negative stage with the positive
//! frozen, and a joint variant that trains both together.

mod losses;
mod objective;
mod optim;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;

pub use losses::{
    augmented_positive_loss, combine, nis_loss, nnd_loss, npd_loss, npd_positive_grad,
    positive_loss, LogitGrads, LossWeights, TermWeights,
};
pub use objective::{
    encode_classes, joint_objective, leading_id_classes, negative_objective, positive_objective,
    ClassPass, LossBreakdown, TokenGrads, TrainingSet,
};
pub use optim::sgd_step;

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::prompts::{
    init_negative_from_positive, init_positive, jittered_copies, NegativePromptSet, PositivePrompt,
    PromptContext, DEFAULT_JITTER,
};
use crate::rng::{stream, Domain};

/// Longer negative-stage schedule, available through [`TrainConfig::extended`].
pub const EXTENDED_STAGE2_EPOCHS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub tau: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub num_negatives: usize,
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 100,
            stage2_epochs: 10,
            learning_rate: 0.02,
            momentum: 0.9,
            tau: 0.01,
            batch_size: None,
            seed: 0,
            num_negatives: 2,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl TrainConfig {
    pub fn extended() -> Self {
        TrainConfig {
            stage2_epochs: EXTENDED_STAGE2_EPOCHS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("train config", "tau must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train config", "learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "train config",
                "momentum must lie in [0, 1)",
            ));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid(
                "train config",
                "batch_size must be positive",
            ));
        }
        if self.num_negatives == 0 {
            return Err(Error::invalid(
                "train config",
                "num_negatives must be positive",
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("train config", "jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Positive,
    Negative,
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Positive => "pos",
            Stage::Negative => "neg",
            Stage::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// One row per epoch (loss before that epoch's updates) plus a closing row,
/// `epoch = epochs`, holding the loss after training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

impl LossTrace {
    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "stage",
            "epoch",
            "loss_total",
            "loss_nis",
            "loss_npd",
            "loss_nnd",
            "loss_positive",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.stage.to_string(),
                r.epoch.to_string(),
                format!("{:.12e}", r.loss.total),
                opt(r.loss.nis),
                opt(r.loss.npd),
                opt(r.loss.nnd),
                opt(r.loss.positive),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::Positive => "stage 1",
        Stage::Negative => "stage 2",
        Stage::Joint => "joint training",
    }
}

fn batches(cfg: &TrainConfig, stage: Stage, epoch: usize, n: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    match cfg.batch_size {
        None => vec![idx],
        Some(b) if b >= n => vec![idx],
        Some(b) => {
            let salt = (stage as u64) << 32 | epoch as u64;
            idx.shuffle(&mut stream(cfg.seed, Domain::Shuffle, salt));
            idx.chunks(b).map(<[usize]>::to_vec).collect()
        }
    }
}

fn check_finite(stage: Stage, epoch: usize, loss: &LossBreakdown, grads: &[f64]) -> Result<()> {
    if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            stage: stage_tag(stage),
            epoch,
            detail: format!("{loss:?}"),
        });
    }
    Ok(())
}

/// Numeric breakdowns inside the loop mean the parameters ran away; report
/// them as divergence rather than as a bare encoder error.
fn diverged(stage: Stage, epoch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::DegenerateEncoding | Error::DegenerateVector | Error::NonFinite(_) => {
            Error::NonFiniteLoss {
                stage: stage_tag(stage),
                epoch,
                detail: e.to_string(),
            }
        }
        other => other,
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> Option<f64>| {
        parts.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    LossBreakdown {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        nis: avg(|p| p.nis),
        npd: avg(|p| p.npd),
        nnd: avg(|p| p.nnd),
        positive: avg(|p| p.positive),
    }
}

/// Runs the epoch loop over a flat parameter vector.
fn optimize<F>(
    stage: Stage,
    params: &mut [f64],
    epochs: usize,
    n_records: usize,
    cfg: &TrainConfig,
    mut objective: F,
) -> Result<LossTrace>
where
    F: FnMut(&[f64], &[usize]) -> Result<(LossBreakdown, Vec<f64>)>,
{
    let mut velocity = vec![0.0; params.len()];
    let mut trace = LossTrace::default();
    for epoch in 0..epochs {
        let mut seen = Vec::new();
        for batch in batches(cfg, stage, epoch, n_records) {
            let (loss, grads) = objective(params, &batch).map_err(diverged(stage, epoch))?;
            check_finite(stage, epoch, &loss, &grads)?;
            sgd_step(
                params,
                &grads,
                cfg.learning_rate,
                cfg.momentum,
                &mut velocity,
            )?;
            seen.push(loss);
        }
        trace.rows.push(TraceRow {
            stage,
            epoch,
            loss: mean_breakdown(&seen),
        });
    }
    let all: Vec<usize> = (0..n_records).collect();
    let (loss, _) = objective(params, &all).map_err(diverged(stage, epochs))?;
    check_finite(stage, epochs, &loss, &[])?;
    trace.rows.push(TraceRow {
        stage,
        epoch: epochs,
        loss,
    });
    Ok(trace)
}

fn split_tokens(flat: &[f64], n: usize, dt: usize) -> Vec<Vec<Vec<f64>>> {
    flat.chunks(n * dt)
        .map(|c| c.chunks(dt).map(<[f64]>::to_vec).collect())
        .collect()
}

/// Learns the positive context with cross-entropy; returns it frozen.
pub fn train_stage1(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(PositivePrompt, LossTrace)> {
    cfg.validate()?;
    let (n, dt) = (enc.context_len(), enc.token_dim());
    let mut prompt = init_positive(cfg.seed, n, dt)?;
    let mut params = prompt.context().flat();
    let trace = optimize(
        Stage::Positive,
        &mut params,
        cfg.stage1_epochs,
        data.len(),
        cfg,
        |p, batch| {
            let ctx = &split_tokens(p, n, dt)[0];
            let (loss, g) = positive_objective(enc, data, batch, ctx, cfg.tau)?;
            let breakdown = LossBreakdown {
                total: loss,
                positive: Some(loss),
                ..LossBreakdown::default()
            };
            Ok((breakdown, g.concat()))
        },
    )?;
    prompt.set_context(PromptContext::from_flat(&params, dt)?)?;
    prompt.freeze();
    Ok((prompt, trace))
}

/// Learns `cfg.num_negatives` negative contexts with the positive frozen.
/// Positive class features are computed once and treated as constants.
pub fn train_stage2(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    positive: &PositivePrompt,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<(NegativePromptSet, LossTrace)> {
    cfg.validate()?;
    weights.validate()?;
    if !positive.is_frozen() {
        return Err(Error::UnfrozenPositive);
    }
    let (n, dt) = (enc.context_len(), enc.token_dim());
    let pos_features =
        encode_classes(enc, positive.context().tokens(), &data.class_tokens)?.features;
    let init = init_negative_from_positive(positive, cfg.num_negatives, cfg.jitter, cfg.seed)?;
    let mut params: Vec<f64> = init
        .contexts()
        .iter()
        .flat_map(PromptContext::flat)
        .collect();
    let trace = optimize(
        Stage::Negative,
        &mut params,
        cfg.stage2_epochs,
        data.len(),
        cfg,
        |p, batch| {
            let negs = split_tokens(p, n, dt);
            let (loss, g) = negative_objective(
                enc,
                data,
                batch,
                &pos_features,
                &negs,
                cfg.tau,
                weights.into(),
            )?;
            Ok((loss, g.concat().concat()))
        },
    )?;
    let contexts = params
        .chunks(n * dt)
        .map(|c| PromptContext::from_flat(c, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok((NegativePromptSet::new(contexts)?, trace))
}

/// Optimizes positive and negative contexts together for `stage1_epochs`.
pub fn train_joint(
    enc: &FrozenEncoder,
    data: &TrainingSet,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<(PositivePrompt, NegativePromptSet, LossTrace)> {
    cfg.validate()?;
    weights.validate()?;
    let (n, dt) = (enc.context_len(), enc.token_dim());
    let mut positive = init_positive(cfg.seed, n, dt)?;
    let negs = jittered_copies(positive.context(), cfg.num_negatives, cfg.jitter, cfg.seed)?;
    let mut params = positive.context().flat();
    params.extend(negs.contexts().iter().flat_map(PromptContext::flat));
    let trace = optimize(
        Stage::Joint,
        &mut params,
        cfg.stage1_epochs,
        data.len(),
        cfg,
        |p, batch| {
            let mut blocks = split_tokens(p, n, dt);
            let pos = blocks.remove(0);
            let (loss, gp, gn) =
                joint_objective(enc, data, batch, &pos, &blocks, cfg.tau, weights)?;
            let mut g = gp.concat();
            g.extend(gn.concat().concat());
            Ok((loss, g))
        },
    )?;
    let mut blocks = params.chunks(n * dt);
    positive.set_context(PromptContext::from_flat(blocks.next().unwrap(), dt)?)?;
    positive.freeze();
    let contexts = blocks
        .map(|c| PromptContext::from_flat(c, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok((positive, NegativePromptSet::new(contexts)?, trace))
}
