//! Negative prompt learning for out-of-distribution detection.
//!
//! A frozen encoder maps a learnable context plus a class token to a unit
//! feature. One positive context is trained with cross-entropy; with it frozen,
//! `p` shared negative contexts are trained to sit away from ID images. At test
//! time the negative similarities join the softmax denominator, lowering the
//! maximum class probability of samples that look negative.

mod binio;
mod rng;

pub mod config;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod math;
pub mod prompts;
pub mod training;
pub mod world;

pub use config::ExperimentConfig;
pub use detection::{
    auroc, classify_id, evaluate, fpr_at_tpr, open_vocab_expand, predict_with_negatives, score,
    ClassFeatures, DetectionReport, ReportRow, Scorer, SimilarityBlock,
};
pub use encoder::{EncoderKind, EncoderSpec, FrozenEncoder};
pub use error::{ConfigError, Error, ParseError, ParseErrorKind, Result};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use prompts::{
    compute_class_features, init_negative_from_positive, init_positive, Checkpoint,
    NegativePromptSet, PositivePrompt, PromptContext,
};
pub use training::{
    train_joint, train_stage1, train_stage2, LossTrace, LossWeights, TrainConfig, TrainingSet,
};
pub use world::{
    generate_world, ClassVocabulary, LabeledFeatureSet, Split, VocabEntry, World, WorldConfig,
};
