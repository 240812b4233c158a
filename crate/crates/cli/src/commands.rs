use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use negprompt_core::detection::{class_features, write_feature_dump, write_report_csv};
use negprompt_core::experiment::{
    evaluate_world, run_joint, run_negative, run_positive, sweep_points, ClassScope, TrainedRun,
};
use negprompt_core::training::EXTENDED_STAGE2_EPOCHS;
use negprompt_core::{
    experiment, generate_world, Checkpoint, DetectionReport, ExperimentConfig, FrozenEncoder,
    ReportRow, Scorer, World,
};
use thiserror::Error;

use crate::{EvalArgs, StageArg, SweepArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: negprompt_core::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

type Result<T, E = CliError> = std::result::Result<T, E>;

trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for negprompt_core::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: f(),
            source,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            ExperimentConfig::parse(&text)
                .map_err(negprompt_core::Error::from)
                .context(|| format!("config {}", p.display()))?
        }
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.join(name));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> negprompt_core::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).context(|| format!("writing {}", path.display()))?;
    w.flush().map_err(io_err(path))
}

fn write_echo(dir: &Path, cfg: &ExperimentConfig, enc: &FrozenEncoder) -> Result<()> {
    let path = dir.join("config.txt");
    fs::write(&path, cfg.echo(enc.fingerprint())).map_err(io_err(&path))
}

fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    write_file(&dir.join("report.csv"), |w| write_report_csv(rows, w))
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, world: &World, run: &TrainedRun) -> Result<()> {
    write_echo(dir, cfg, &world.encoder)?;
    write_file(&dir.join("loss_trace.csv"), |w| run.trace.write_csv(w))?;
    let ckpt = dir.join("checkpoint.npk");
    run.checkpoint
        .save(&ckpt)
        .context(|| format!("writing {}", ckpt.display()))
}

fn load_world(dir: &Path) -> Result<World> {
    World::load(dir).context(|| format!("loading world from {}", dir.display()))
}

fn load_checkpoint(path: &Path, world: &World) -> Result<Checkpoint> {
    Checkpoint::load(path, &world.encoder)
        .context(|| format!("loading checkpoint {}", path.display()))
}

fn row(cfg: &ExperimentConfig, report: DetectionReport) -> ReportRow {
    ReportRow {
        beta: cfg.weights.beta,
        gamma: cfg.weights.gamma,
        seed: cfg.seed(),
        report,
    }
}

fn summary(report: &DetectionReport) -> String {
    format!(
        "{} k_train={} k_eval={} p={} auroc={:.4} fpr95={:.4} top1={:.4}",
        report.scorer,
        report.k_train,
        report.k_eval,
        report.p,
        report.auroc,
        report.fpr95,
        report.top1_acc
    )
}

pub fn gen_world(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(cfg, out, "world")?;
    let world = generate_world(&cfg.world).context(|| "generating world".into())?;
    world
        .save(&dir)
        .context(|| format!("writing world to {}", dir.display()))?;
    write_echo(&dir, cfg, &world.encoder)?;
    println!(
        "world: {} id-train, {} id-test, {} ood-test records; encoder {:#018x} -> {}",
        world.id_train.len(),
        world.id_test.len(),
        world.ood_test.len(),
        world.encoder.fingerprint(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, args: TrainArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let mut cfg = cfg.clone();
    if args.extended_schedule {
        cfg.train.stage2_epochs = EXTENDED_STAGE2_EPOCHS;
    }
    let scope = if args.open_vocab {
        ClassScope::Leading(cfg.open_vocab_fraction)
    } else {
        ClassScope::All
    };
    if args.stage != StageArg::Neg && args.checkpoint.is_some() {
        return Err(CliError::Usage(
            "--checkpoint is only used with --stage neg".into(),
        ));
    }
    let (run, scorer, name) = match args.stage {
        StageArg::Pos => {
            let run =
                run_positive(&world, &cfg.train, scope).context(|| "positive stage".into())?;
            (run, Scorer::Mcm, "train-pos")
        }
        StageArg::Neg => {
            let path = args.checkpoint.as_deref().ok_or_else(|| {
                CliError::Usage(
                    "--stage neg needs --checkpoint with a trained positive prompt".into(),
                )
            })?;
            if args.open_vocab {
                return Err(CliError::Usage(
                    "--stage neg trains on the classes of its positive checkpoint; pass --open-vocab to the positive stage".into(),
                ));
            }
            let pos = load_checkpoint(path, &world)?;
            let run = run_negative(&world, &pos, &cfg.train, cfg.weights)
                .context(|| "negative stage".into())?;
            (run, Scorer::NegPrompt, "train-neg")
        }
        StageArg::Joint => {
            let run = run_joint(&world, &cfg.train, cfg.weights, scope)
                .context(|| "joint training".into())?;
            (run, Scorer::NegPrompt, "train-joint")
        }
    };
    let dir = out_dir(&cfg, args.out, name)?;
    let subset = run.checkpoint.trained_classes.len() < world.vocab.id_classes().len();
    let report =
        evaluate_world(&world, &run.checkpoint, scorer, subset).context(|| "evaluation".into())?;
    println!("{}", summary(&report));
    write_run(&dir, &cfg, &world, &run)?;
    write_report(&dir, &[row(&cfg, report)])
}

pub fn eval(cfg: &ExperimentConfig, args: EvalArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let ckpt = load_checkpoint(&args.checkpoint, &world)?;
    let scorer = args.scorer.map(Scorer::from).unwrap_or(cfg.scorer);
    let report =
        evaluate_world(&world, &ckpt, scorer, args.open_vocab).context(|| "evaluation".into())?;
    let dir = out_dir(cfg, args.out, "eval")?;
    if args.dump_features {
        let classes: Vec<usize> = report
            .eval_classes
            .iter()
            .filter_map(|n| world.vocab.index_of(n))
            .collect();
        let feats = class_features(&ckpt, &world.encoder, &world.vocab, &classes)
            .context(|| "class features".into())?;
        write_file(&dir.join("features.csv"), |w| {
            write_feature_dump(w, &world.id_test, &world.ood_test, &feats)
        })?;
    }
    println!("{}", summary(&report));
    write_echo(&dir, cfg, &world.encoder)?;
    write_report(&dir, &[row(cfg, report)])
}

pub fn gradcheck(cfg: &ExperimentConfig, world: Option<PathBuf>) -> Result<()> {
    let enc = match world {
        Some(dir) => load_world(&dir)?.encoder,
        None => FrozenEncoder::seeded(cfg.world.encoder, cfg.seed())
            .context(|| "building encoder".into())?,
    };
    let report = negprompt_core::gradcheck(&enc, cfg.seed()).context(|| "gradient check".into())?;
    let line = format!(
        "{} encoder {:#018x}: max relative error {:.3e} over {} probes",
        enc.kind(),
        enc.fingerprint(),
        report.max_rel_error,
        report.probes
    );
    if !report.passed {
        return Err(CliError::GradcheckFailed(line));
    }
    println!("gradcheck passed: {line}");
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, args: SweepArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let betas = args.beta_grid.unwrap_or_else(|| vec![cfg.weights.beta]);
    let gammas = args.gamma_grid.unwrap_or_else(|| vec![cfg.weights.gamma]);
    let ps = args.p_grid.unwrap_or_else(|| vec![cfg.train.num_negatives]);
    let points = sweep_points(&betas, &gammas, &ps);
    if points.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let (pos, runs) = experiment::sweep(&world, cfg, &points).context(|| "sweep".into())?;
    let dir = out_dir(cfg, args.out, "sweep")?;
    write_echo(&dir, cfg, &world.encoder)?;
    let pos_dir = dir.join("positive");
    fs::create_dir_all(&pos_dir).map_err(io_err(&pos_dir))?;
    write_run(&pos_dir, cfg, &world, &pos)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (i, r) in runs.into_iter().enumerate() {
        let mut point_cfg = cfg.clone();
        point_cfg.weights.beta = r.point.beta;
        point_cfg.weights.gamma = r.point.gamma;
        point_cfg.train.num_negatives = r.point.p;
        let point_dir = dir.join(format!("point-{i:03}"));
        fs::create_dir_all(&point_dir).map_err(io_err(&point_dir))?;
        write_run(&point_dir, &point_cfg, &world, &r.run)?;
        write_report(&point_dir, std::slice::from_ref(&r.row))?;
        println!(
            "beta={} gamma={} p={}: {}",
            r.point.beta,
            r.point.gamma,
            r.point.p,
            summary(&r.row.report)
        );
        rows.push(r.row);
    }
    write_report(&dir, &rows)
}
