//! `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Missing keys take their defaults,
//! unknown or repeated keys are rejected.

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::detection::Scorer;
use crate::error::ConfigError;
use crate::training::{LossWeights, TrainConfig};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub scorer: Scorer,
    pub open_vocab_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            scorer: Scorer::NegPrompt,
            open_vocab_fraction: 0.1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "id_classes",
    "ood_classes",
    "shots_per_class",
    "test_per_class",
    "noise_sigma",
    "hardness",
    "class_token_scale",
    "encoder_kind",
    "token_dim",
    "feature_dim",
    "hidden_dim",
    "context_len",
    "stage1_epochs",
    "stage2_epochs",
    "learning_rate",
    "momentum",
    "tau",
    "batch_size",
    "p",
    "jitter",
    "beta",
    "gamma",
    "scorer",
    "open_vocab_fraction",
    "output_dir",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        message: format!("cannot parse `{raw}`: {e}"),
    })
}

fn bad(key: &str, message: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.to_string(),
    }
}

impl ExperimentConfig {
    /// Sets the run seed, shared by world generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.world.seed
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let w = &mut self.world;
        let t = &mut self.train;
        match key {
            "seed" => self.set_seed(value(key, raw)?),
            "id_classes" => w.id_classes = value(key, raw)?,
            "ood_classes" => w.ood_classes = value(key, raw)?,
            "shots_per_class" => w.shots_per_class = value(key, raw)?,
            "test_per_class" => w.test_per_class = value(key, raw)?,
            "noise_sigma" => w.noise_sigma = value(key, raw)?,
            "hardness" => w.hardness = value(key, raw)?,
            "class_token_scale" => w.class_token_scale = value(key, raw)?,
            "encoder_kind" => w.encoder.kind = value(key, raw)?,
            "token_dim" => w.encoder.token_dim = value(key, raw)?,
            "feature_dim" => w.encoder.feature_dim = value(key, raw)?,
            "hidden_dim" => w.encoder.hidden_dim = value(key, raw)?,
            "context_len" => w.encoder.context_len = value(key, raw)?,
            "stage1_epochs" => t.stage1_epochs = value(key, raw)?,
            "stage2_epochs" => t.stage2_epochs = value(key, raw)?,
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "momentum" => t.momentum = value(key, raw)?,
            "tau" => t.tau = value(key, raw)?,
            "batch_size" => {
                let b: usize = value(key, raw)?;
                t.batch_size = (b > 0).then_some(b);
            }
            "p" => t.num_negatives = value(key, raw)?,
            "jitter" => t.jitter = value(key, raw)?,
            "beta" => self.weights.beta = value(key, raw)?,
            "gamma" => self.weights.gamma = value(key, raw)?,
            "scorer" => self.scorer = value(key, raw)?,
            "open_vocab_fraction" => self.open_vocab_fraction = value(key, raw)?,
            "output_dir" => self.output_dir = PathBuf::from(raw),
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.world;
        let t = &self.train;
        let positive = [
            ("id_classes", w.id_classes),
            ("ood_classes", w.ood_classes),
            ("shots_per_class", w.shots_per_class),
            ("test_per_class", w.test_per_class),
            ("token_dim", w.encoder.token_dim),
            ("feature_dim", w.encoder.feature_dim),
            ("hidden_dim", w.encoder.hidden_dim),
            ("context_len", w.encoder.context_len),
            ("p", t.num_negatives),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        let non_negative = [
            ("noise_sigma", w.noise_sigma),
            ("learning_rate", t.learning_rate),
            ("jitter", t.jitter),
            ("beta", self.weights.beta),
            ("gamma", self.weights.gamma),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&w.hardness) {
            return Err(bad("hardness", "must lie in [0, 1]"));
        }
        if !(w.class_token_scale > 0.0 && w.class_token_scale.is_finite()) {
            return Err(bad("class_token_scale", "must be > 0"));
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return Err(bad("tau", "must be > 0"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if t.num_negatives > 1 && t.jitter == 0.0 {
            return Err(bad("jitter", "must be > 0 when p > 1"));
        }
        if !(self.open_vocab_fraction > 0.0 && self.open_vocab_fraction <= 1.0) {
            return Err(bad("open_vocab_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("malformed key `{key}`"),
                });
            }
            if raw.is_empty() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("missing value for `{key}`"),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("`{key}` given twice"),
                });
            }
            cfg.set(key, raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let w = &self.world;
        let t = &self.train;
        let values: Vec<String> = vec![
            w.seed.to_string(),
            w.id_classes.to_string(),
            w.ood_classes.to_string(),
            w.shots_per_class.to_string(),
            w.test_per_class.to_string(),
            w.noise_sigma.to_string(),
            w.hardness.to_string(),
            w.class_token_scale.to_string(),
            w.encoder.kind.to_string(),
            w.encoder.token_dim.to_string(),
            w.encoder.feature_dim.to_string(),
            w.encoder.hidden_dim.to_string(),
            w.encoder.context_len.to_string(),
            t.stage1_epochs.to_string(),
            t.stage2_epochs.to_string(),
            t.learning_rate.to_string(),
            t.momentum.to_string(),
            t.tau.to_string(),
            t.batch_size.unwrap_or(0).to_string(),
            t.num_negatives.to_string(),
            t.jitter.to_string(),
            self.weights.beta.to_string(),
            self.weights.gamma.to_string(),
            self.scorer.to_string(),
            self.open_vocab_fraction.to_string(),
            self.output_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Serialized config plus a comment line naming the encoder fingerprint.
    /// The result parses back to the same config.
    pub fn echo(&self, encoder_fingerprint: u64) -> String {
        format!(
            "{}# encoder_fingerprint = {encoder_fingerprint:#018x}\n",
            self.serialize()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.weights.beta, cfg.weights.gamma), (0.1, 0.05));
        assert_eq!(cfg.train.num_negatives, 2);
        assert_eq!(cfg.world.shots_per_class, 16);
        assert_eq!(cfg.world.encoder.context_len, 16);
    }

    #[test]
    fn negative_beta_names_key() {
        let err = ExperimentConfig::parse("beta = -1").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Value { key, .. } if key == "beta"),
            "{err}"
        );
    }

    #[test]
    fn syntax_error_has_line() {
        let err = ExperimentConfig::parse("seed = 1\n\nnot a pair\n").unwrap_err();
        assert_eq!(err.to_string().split(':').next().unwrap(), "line 3");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse("# c\nwarmup = 3").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 2,
                key: "warmup".into()
            }
        );
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(ExperimentConfig::parse("p = 1\np = 2").is_err());
    }

    #[test]
    fn echo_parses_back() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_seed(9);
        cfg.train.batch_size = Some(32);
        cfg.weights.beta = 0.3;
        let back = ExperimentConfig::parse(&cfg.echo(0xdead)).unwrap();
        assert_eq!(back, cfg);
    }
}
