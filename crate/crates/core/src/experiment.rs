//! End-to-end runs shared by the command line and the experiment tests.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::detection::{evaluate, DetectionReport, ReportRow, Scorer};
use crate::error::Result;
use crate::prompts::{Checkpoint, PositivePrompt};
use crate::training::{
    leading_id_classes, train_joint, train_stage1, train_stage2, LossTrace, LossWeights,
    TrainConfig, TrainingSet,
};
use crate::world::World;

/// Which ID classes the prompts are trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassScope {
    All,
    /// The leading fraction of ID classes, for open-vocabulary runs.
    Leading(f64),
}

impl ClassScope {
    pub fn classes(self, world: &World) -> Result<Vec<usize>> {
        match self {
            ClassScope::All => Ok(world.vocab.id_classes()),
            ClassScope::Leading(f) => leading_id_classes(&world.vocab, f),
        }
    }

    pub fn is_open_vocab(self) -> bool {
        matches!(self, ClassScope::Leading(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

fn checkpoint(
    world: &World,
    data: &TrainingSet,
    cfg: &TrainConfig,
    positive: PositivePrompt,
    negatives: Option<crate::prompts::NegativePromptSet>,
) -> Checkpoint {
    Checkpoint {
        positive,
        negatives,
        tau: cfg.tau,
        encoder_fingerprint: world.encoder.fingerprint(),
        trained_classes: data.class_names.clone(),
    }
}

/// Stage 1 only. The checkpoint carries no negatives.
pub fn run_positive(world: &World, cfg: &TrainConfig, scope: ClassScope) -> Result<TrainedRun> {
    let data = TrainingSet::from_world(world, &scope.classes(world)?)?;
    let (positive, trace) = train_stage1(&world.encoder, &data, cfg)?;
    Ok(TrainedRun {
        checkpoint: checkpoint(world, &data, cfg, positive, None),
        trace,
    })
}

/// Stage 2 on top of a positive checkpoint, using its trained classes.
pub fn run_negative(
    world: &World,
    positive: &Checkpoint,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<TrainedRun> {
    positive.verify(&world.encoder)?;
    let classes = crate::detection::trained_class_indices(positive, &world.vocab)?;
    let data = TrainingSet::from_world(world, &classes)?;
    let (negatives, trace) = train_stage2(&world.encoder, &data, &positive.positive, cfg, weights)?;
    Ok(TrainedRun {
        checkpoint: checkpoint(
            world,
            &data,
            cfg,
            positive.positive.clone(),
            Some(negatives),
        ),
        trace,
    })
}

/// Both stages in sequence; the trace holds both.
pub fn run_two_stage(
    world: &World,
    cfg: &TrainConfig,
    weights: LossWeights,
    scope: ClassScope,
) -> Result<(TrainedRun, TrainedRun)> {
    let pos = run_positive(world, cfg, scope)?;
    let neg = run_negative(world, &pos.checkpoint, cfg, weights)?;
    Ok((pos, neg))
}

pub fn run_joint(
    world: &World,
    cfg: &TrainConfig,
    weights: LossWeights,
    scope: ClassScope,
) -> Result<TrainedRun> {
    let data = TrainingSet::from_world(world, &scope.classes(world)?)?;
    let (positive, negatives, trace) = train_joint(&world.encoder, &data, cfg, weights)?;
    Ok(TrainedRun {
        checkpoint: checkpoint(world, &data, cfg, positive, Some(negatives)),
        trace,
    })
}

pub fn evaluate_world(
    world: &World,
    ckpt: &Checkpoint,
    scorer: Scorer,
    open_vocab: bool,
) -> Result<DetectionReport> {
    evaluate(
        ckpt,
        &world.encoder,
        &world.vocab,
        &world.id_test,
        &world.ood_test,
        scorer,
        open_vocab,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub gamma: f64,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub point: SweepPoint,
    pub run: TrainedRun,
    pub row: ReportRow,
}

/// Every (β, γ, p) combination, grid order β-major then γ then p.
pub fn sweep_points(betas: &[f64], gammas: &[f64], ps: &[usize]) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(betas.len() * gammas.len() * ps.len());
    for &beta in betas {
        for &gamma in gammas {
            for &p in ps {
                out.push(SweepPoint { beta, gamma, p });
            }
        }
    }
    out
}

/// One shared positive stage, then an independent negative stage and
/// negprompt evaluation per grid point. Runs in parallel; output order
/// follows the grid.
pub fn sweep(
    world: &World,
    cfg: &ExperimentConfig,
    points: &[SweepPoint],
) -> Result<(TrainedRun, Vec<SweepRun>)> {
    let pos = run_positive(world, &cfg.train, ClassScope::All)?;
    let runs = points
        .par_iter()
        .map(|pt| {
            let train = TrainConfig {
                num_negatives: pt.p,
                ..cfg.train.clone()
            };
            let weights = LossWeights {
                beta: pt.beta,
                gamma: pt.gamma,
            };
            weights.validate()?;
            let run = run_negative(world, &pos.checkpoint, &train, weights)?;
            let report = evaluate_world(world, &run.checkpoint, Scorer::NegPrompt, false)?;
            Ok(SweepRun {
                point: pt.clone(),
                row: ReportRow {
                    beta: pt.beta,
                    gamma: pt.gamma,
                    seed: cfg.seed(),
                    report,
                },
                run,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pos, runs))
}
