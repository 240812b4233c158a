//! Scoring with negative prompts, ID classification, open-vocabulary feature
//! expansion and the detection metric suite.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::math::{argmax, dot, log_sum_exp};
use crate::prompts::{compute_class_features, Checkpoint};
use crate::world::{ClassVocabulary, LabeledFeatureSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scorer {
    Mcm,
    NegPrompt,
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scorer::Mcm => "mcm",
            Scorer::NegPrompt => "negprompt",
        })
    }
}

impl FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcm" => Ok(Scorer::Mcm),
            "negprompt" => Ok(Scorer::NegPrompt),
            other => Err(format!("expected mcm or negprompt, got `{other}`")),
        }
    }
}

/// Temperature-scaled similarities of one image to every class feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    /// k entries, sim(T_pos_j, I) / τ
    pub s_pos: Vec<f64>,
    /// p rows of k entries, sim(T_neg_lj, I) / τ
    pub s_neg: Vec<Vec<f64>>,
    pub tau: f64,
}

impl SimilarityBlock {
    pub fn new(s_pos: Vec<f64>, s_neg: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if s_pos.is_empty() {
            return Err(Error::Empty("positive similarities"));
        }
        if let Some(row) = s_neg.iter().find(|r| r.len() != s_pos.len()) {
            return Err(Error::DimensionMismatch {
                what: "negative similarities",
                expected: s_pos.len(),
                got: row.len(),
            });
        }
        if s_pos
            .iter()
            .chain(s_neg.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("similarity block"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", "must be > 0"));
        }
        Ok(SimilarityBlock { s_pos, s_neg, tau })
    }

    pub fn from_features(
        image: &[f64],
        positive: &[Vec<f64>],
        negative: &[Vec<Vec<f64>>],
        tau: f64,
    ) -> Result<Self> {
        let s_pos = positive.iter().map(|t| dot(t, image) / tau).collect();
        let s_neg = negative
            .iter()
            .map(|row| row.iter().map(|t| dot(t, image) / tau).collect())
            .collect();
        Self::new(s_pos, s_neg, tau)
    }

    pub fn k(&self) -> usize {
        self.s_pos.len()
    }

    pub fn p(&self) -> usize {
        self.s_neg.len()
    }

    fn log_partition(&self) -> f64 {
        let all: Vec<f64> = self
            .s_pos
            .iter()
            .chain(self.s_neg.iter().flatten())
            .copied()
            .collect();
        log_sum_exp(&all)
    }
}

/// Probabilities of the k ID classes when the softmax denominator also runs
/// over every negative similarity. With p = 0 this is the plain softmax.
pub fn predict_with_negatives(block: &SimilarityBlock) -> Vec<f64> {
    let lz = block.log_partition();
    block.s_pos.iter().map(|s| (s - lz).exp()).collect()
}

/// The p × k probabilities the augmented softmax assigns to negative entries.
pub fn negative_probabilities(block: &SimilarityBlock) -> Vec<Vec<f64>> {
    let lz = block.log_partition();
    block
        .s_neg
        .iter()
        .map(|row| row.iter().map(|s| (s - lz).exp()).collect())
        .collect()
}

/// ID-ness score, higher meaning more in-distribution.
pub fn score(block: &SimilarityBlock, scorer: Scorer) -> Result<f64> {
    let max = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    match scorer {
        Scorer::Mcm => {
            let lz = log_sum_exp(&block.s_pos);
            Ok(max(block.s_pos.iter().map(|s| (s - lz).exp()).collect()))
        }
        Scorer::NegPrompt => {
            if block.p() == 0 {
                return Err(Error::NoNegatives);
            }
            Ok(max(predict_with_negatives(block)))
        }
    }
}

/// Argmax over the positive similarities, lowest index on ties.
pub fn classify_id(block: &SimilarityBlock) -> usize {
    argmax(&block.s_pos)
}

/// Class features produced by a checkpoint's contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub class_names: Vec<String>,
    pub positive: Vec<Vec<f64>>,
    /// p rows of k features
    pub negative: Vec<Vec<Vec<f64>>>,
}

/// Encodes the checkpoint contexts against `classes` (vocabulary indices).
pub fn class_features(
    ckpt: &Checkpoint,
    enc: &FrozenEncoder,
    vocab: &ClassVocabulary,
    classes: &[usize],
) -> Result<ClassFeatures> {
    ckpt.verify(enc)?;
    if vocab.token_dim() != enc.token_dim() {
        return Err(Error::DimensionMismatch {
            what: "class token dim",
            expected: enc.token_dim(),
            got: vocab.token_dim(),
        });
    }
    let positive = compute_class_features(enc, ckpt.positive.context(), vocab, classes)?;
    let negative = ckpt
        .negatives
        .iter()
        .flat_map(|s| s.contexts())
        .map(|c| compute_class_features(enc, c, vocab, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassFeatures {
        class_names: classes
            .iter()
            .map(|&i| vocab.entries()[i].name.clone())
            .collect(),
        positive,
        negative,
    })
}

/// Features for every ID class of `full_vocab`, trained or not, built from the
/// trained contexts unchanged.
pub fn open_vocab_expand(
    ckpt: &Checkpoint,
    enc: &FrozenEncoder,
    full_vocab: &ClassVocabulary,
) -> Result<ClassFeatures> {
    class_features(ckpt, enc, full_vocab, &full_vocab.id_classes())
}

fn check_scores(s: &[f64], what: &'static str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Empty(what));
    }
    if s.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Probability that an ID sample outscores an OOD sample, ties at half weight.
/// Computed from midranks in O(n log n).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Fraction of OOD scores at or above the threshold that keeps `tpr` of the
/// ID scores. The threshold is the ⌈(1 − tpr)·N⌉-th smallest ID score.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid("tpr", format!("{tpr} is outside (0, 1]")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // the epsilon absorbs representation error in (1 - tpr)·N
    let rank = (((1.0 - tpr) * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let t = sorted[rank.min(sorted.len()) - 1];
    let hits = ood_scores.iter().filter(|&&s| s >= t).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub score: f64,
    pub predicted: usize,
    pub max_pos_sim: f64,
    pub max_neg_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub scorer: Scorer,
    pub open_vocab: bool,
    pub k_train: usize,
    pub k_eval: usize,
    pub p: usize,
    pub eval_classes: Vec<String>,
    pub id: Vec<SampleResult>,
    pub ood: Vec<SampleResult>,
    pub auroc: f64,
    pub fpr95: f64,
    pub top1_acc: f64,
    pub id_mean_max_pos_sim: f64,
    pub id_mean_max_neg_sim: Option<f64>,
    pub ood_mean_max_pos_sim: f64,
    pub ood_mean_max_neg_sim: Option<f64>,
}

impl DetectionReport {
    pub fn id_scores(&self) -> Vec<f64> {
        self.id.iter().map(|r| r.score).collect()
    }

    pub fn ood_scores(&self) -> Vec<f64> {
        self.ood.iter().map(|r| r.score).collect()
    }

    pub fn id_predictions(&self) -> Vec<usize> {
        self.id.iter().map(|r| r.predicted).collect()
    }
}

fn score_set(
    set: &LabeledFeatureSet,
    feats: &ClassFeatures,
    tau: f64,
    scorer: Scorer,
) -> Result<Vec<SampleResult>> {
    set.features()
        .par_iter()
        .map(|x| {
            let block = SimilarityBlock::from_features(x, &feats.positive, &feats.negative, tau)?;
            let max_neg = block.s_neg.iter().flatten().copied().reduce(f64::max);
            Ok(SampleResult {
                score: score(&block, scorer)?,
                predicted: classify_id(&block),
                max_pos_sim: block
                    .s_pos
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
                    * tau,
                max_neg_sim: max_neg.map(|s| s * tau),
            })
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Resolves checkpoint class names against the vocabulary.
pub fn trained_class_indices(ckpt: &Checkpoint, vocab: &ClassVocabulary) -> Result<Vec<usize>> {
    ckpt.trained_classes
        .iter()
        .map(|n| {
            vocab
                .index_of(n)
                .ok_or_else(|| Error::UnknownClass(n.clone()))
        })
        .collect()
}

/// Scores both test sets and aggregates the metrics.
///
/// Without `open_vocab` the checkpoint must cover every ID class; with it the
/// trained contexts are expanded to all ID classes of `vocab`.
pub fn evaluate(
    ckpt: &Checkpoint,
    enc: &FrozenEncoder,
    vocab: &ClassVocabulary,
    id_test: &LabeledFeatureSet,
    ood_test: &LabeledFeatureSet,
    scorer: Scorer,
    open_vocab: bool,
) -> Result<DetectionReport> {
    ckpt.verify(enc)?;
    if scorer == Scorer::NegPrompt && ckpt.num_negatives() == 0 {
        return Err(Error::NoNegatives);
    }
    id_test.check_against(vocab)?;
    ood_test.check_against(vocab)?;
    let trained = trained_class_indices(ckpt, vocab)?;
    let all_id = vocab.id_classes();
    let classes = if open_vocab {
        all_id
    } else {
        let mut sorted = trained.clone();
        sorted.sort_unstable();
        if sorted != all_id {
            return Err(Error::invalid(
                "checkpoint classes",
                format!(
                    "checkpoint was trained on {} of {} ID classes; use open-vocabulary evaluation",
                    trained.len(),
                    all_id.len()
                ),
            ));
        }
        trained.clone()
    };
    let feats = class_features(ckpt, enc, vocab, &classes)?;
    let id = score_set(id_test, &feats, ckpt.tau, scorer)?;
    let ood = score_set(ood_test, &feats, ckpt.tau, scorer)?;
    let id_scores: Vec<f64> = id.iter().map(|r| r.score).collect();
    let ood_scores: Vec<f64> = ood.iter().map(|r| r.score).collect();
    let correct = id
        .iter()
        .enumerate()
        .filter(|(i, r)| feats.class_names[r.predicted] == id_test.label_name(*i))
        .count();
    let neg_mean = |v: &[SampleResult]| -> Option<f64> {
        v.iter()
            .map(|r| r.max_neg_sim)
            .collect::<Option<Vec<_>>>()
            .map(|x| mean(x.into_iter()))
    };
    Ok(DetectionReport {
        scorer,
        open_vocab,
        k_train: trained.len(),
        k_eval: classes.len(),
        p: ckpt.num_negatives(),
        eval_classes: feats.class_names.clone(),
        auroc: auroc(&id_scores, &ood_scores)?,
        fpr95: fpr_at_tpr(&id_scores, &ood_scores, 0.95)?,
        top1_acc: correct as f64 / id.len() as f64,
        id_mean_max_pos_sim: mean(id.iter().map(|r| r.max_pos_sim)),
        id_mean_max_neg_sim: neg_mean(&id),
        ood_mean_max_pos_sim: mean(ood.iter().map(|r| r.max_pos_sim)),
        ood_mean_max_neg_sim: neg_mean(&ood),
        id,
        ood,
    })
}

/// A report plus the run settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub report: DetectionReport,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "scorer",
    "open_vocab",
    "k_train",
    "k_eval",
    "p",
    "beta",
    "gamma",
    "seed",
    "auroc",
    "fpr95",
    "top1_acc",
    "id_mean_max_pos_sim",
    "id_mean_max_neg_sim",
    "ood_mean_max_pos_sim",
    "ood_mean_max_neg_sim",
];

pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let num = |x: f64| format!("{x:.10}");
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS)?;
    for row in rows {
        let r = &row.report;
        out.write_record([
            r.scorer.to_string(),
            r.open_vocab.to_string(),
            r.k_train.to_string(),
            r.k_eval.to_string(),
            r.p.to_string(),
            row.beta.to_string(),
            row.gamma.to_string(),
            row.seed.to_string(),
            num(r.auroc),
            num(r.fpr95),
            num(r.top1_acc),
            num(r.id_mean_max_pos_sim),
            opt(r.id_mean_max_neg_sim),
            num(r.ood_mean_max_pos_sim),
            opt(r.ood_mean_max_neg_sim),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes every test feature and class feature as CSV rows
/// `(group, index, label, f0..f{d-1})` for external plotting.
pub fn write_feature_dump<W: Write>(
    w: W,
    id_test: &LabeledFeatureSet,
    ood_test: &LabeledFeatureSet,
    feats: &ClassFeatures,
) -> Result<()> {
    let d = feats.positive[0].len();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["group".to_string(), "index".into(), "label".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    let mut emit = |group: &str, index: usize, label: &str, v: &[f64]| -> Result<()> {
        let mut rec = vec![group.to_string(), index.to_string(), label.to_string()];
        rec.extend(v.iter().map(|x| format!("{x:.8}")));
        out.write_record(&rec)?;
        Ok(())
    };
    for (group, set) in [("id_test", id_test), ("ood_test", ood_test)] {
        for (i, f) in set.features().iter().enumerate() {
            emit(group, i, set.label_name(i), f)?;
        }
    }
    for (j, f) in feats.positive.iter().enumerate() {
        emit("positive_prompt", j, &feats.class_names[j], f)?;
    }
    for (l, row) in feats.negative.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            emit(&format!("negative_prompt_{l}"), j, &feats.class_names[j], f)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(s_pos: Vec<f64>, s_neg: Vec<Vec<f64>>) -> SimilarityBlock {
        SimilarityBlock::new(s_pos, s_neg, 1.0).unwrap()
    }

    #[test]
    fn symmetric_blocks() {
        let p = predict_with_negatives(&block(vec![0.4], vec![vec![0.4]]));
        assert!((p[0] - 0.5).abs() < 1e-15);
        let p = predict_with_negatives(&block(vec![1.0; 2], vec![vec![1.0; 2]; 2]));
        assert!(p.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn score_examples() {
        let b = block(vec![0.2, 0.2], vec![]);
        assert!((score(&b, Scorer::Mcm).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            score(&b, Scorer::NegPrompt),
            Err(Error::NoNegatives)
        ));
        // e^2 / (e^2 + 1)
        let s = score(&block(vec![2.0], vec![vec![0.0]]), Scorer::NegPrompt).unwrap();
        assert!((s - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn classify_ties_to_lowest() {
        assert_eq!(classify_id(&block(vec![0.1, 0.9], vec![])), 1);
        assert_eq!(classify_id(&block(vec![0.5, 0.5], vec![])), 0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, 0.9], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.5, 0.5], &[0.5, 0.3, 0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(
            fpr_at_tpr(&[0.9, 0.8, 0.7], &[0.1, 0.2], 0.95).unwrap(),
            0.0
        );
        let id = vec![1.0; 100];
        assert_eq!(fpr_at_tpr(&id, &[1.0, 0.0], 0.95).unwrap(), 0.5);
        assert!(fpr_at_tpr(&id, &[], 0.95).is_err());
        assert!(fpr_at_tpr(&id, &[0.0], 0.0).is_err());
    }

    #[test]
    fn fpr_uses_fifth_smallest_of_hundred() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        // threshold is 5.0: OOD scores 5 and 6 count, 4.9 does not
        assert!((fpr_at_tpr(&id, &[4.9, 5.0, 6.0, 0.0], 0.95).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scorer_parses_from_display() {
        for s in [Scorer::Mcm, Scorer::NegPrompt] {
            assert_eq!(s.to_string().parse::<Scorer>().unwrap(), s);
        }
    }
}
