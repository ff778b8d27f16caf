//! Experiment configuration files.
//!
//! One `key = value` per line, `#` starts a comment, dotted keys address
//! sections (`assoc.visit_weight = 0.5`). Lists are comma separated. Unknown
//! keys and unparsable values are rejected with the offending line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::assoc::AssocConfig;
use crate::data::{DomainPairSpec, Generator};
use crate::error::{Error, Result};
use crate::harness::{Regime, TrainConfig};
use crate::mmd::MmdConfig;
use crate::network::{Activation, MlpSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = MlpSpec::default();
        Self {
            hidden_dims: spec.hidden_dims,
            embedding_dim: spec.embedding_dim,
            activation: spec.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Seeds data generation, network initialization and batch streams.
    pub seed: u64,
    pub regimes: Vec<Regime>,
    pub outdir: PathBuf,
    pub data: DomainPairSpec,
    pub model: ModelConfig,
    /// `regime` and `seed` inside are overwritten per run.
    pub train: TrainConfig,
    /// Kernel for the `da_mmd` loss and the embedding MMD evaluation.
    pub mmd: MmdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regimes: Regime::ALL.to_vec(),
            outdir: PathBuf::from("out"),
            data: DomainPairSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mmd: MmdConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

/// Library errors raised while parsing enum values become config errors.
fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "outdir" => self.outdir = PathBuf::from(value),
            "regime" | "regimes" => {
                self.regimes = if value == "all" {
                    Regime::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|r| parse_enum(key, r.trim()))
                        .collect::<Result<_>>()?
                };
            }

            "data.generator" => d.generator = parse_enum::<Generator>(key, value)?,
            "data.rotation" => d.rotation = parse(key, value)?,
            "data.translation" => {
                let v: Vec<f64> = parse_list(key, value)?;
                d.translation = <[f64; 2]>::try_from(v.as_slice())
                    .map_err(|_| Error::Config(format!("{key}: expected two values")))?;
            }
            "data.noise_std" => d.noise_std = parse(key, value)?,
            "data.invert_prob" => d.invert_prob = parse(key, value)?,
            "data.train_samples" => d.train_samples = parse(key, value)?,
            "data.test_samples" => d.test_samples = parse(key, value)?,
            "data.num_classes" => d.num_classes = parse(key, value)?,
            "data.grid_spacing" => d.grid_spacing = parse(key, value)?,
            "data.mnist_dir" => {
                d.mnist_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }

            "model.hidden_dims" => self.model.hidden_dims = parse_list(key, value)?,
            "model.embedding_dim" => self.model.embedding_dim = parse(key, value)?,
            "model.activation" => self.model.activation = parse_enum(key, value)?,

            "train.total_steps" => t.total_steps = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "train.per_class" => t.per_class = parse(key, value)?,
            "train.unlabeled_batch_size" => t.unlabeled_batch_size = parse(key, value)?,
            "train.alpha_after_delay" => t.alpha_after_delay = parse(key, value)?,
            "train.assoc_delay_steps" => t.assoc_delay_steps = parse(key, value)?,
            "train.mmd_weight" => t.mmd_weight = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,

            "assoc.walker_weight" => t.assoc.walker_weight = parse(key, value)?,
            "assoc.visit_weight" => t.assoc.visit_weight = parse(key, value)?,
            "assoc.clamp" => t.assoc.clamp = parse(key, value)?,

            "mmd.bandwidth_multipliers" => self.mmd.bandwidth_multipliers = parse_list(key, value)?,
            "mmd.use_median_heuristic" => self.mmd.use_median_heuristic = parse_bool(key, value)?,
            "mmd.fixed_bandwidth" => {
                self.mmd.fixed_bandwidth = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            "mmd.estimator" => self.mmd.estimator = parse_enum(key, value)?,

            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Input width and class count implied by the data generator.
    pub fn data_shape(&self) -> (usize, usize) {
        match self.data.generator {
            Generator::TwoMoons => (2, 2),
            Generator::GaussianGrid => (2, self.data.num_classes),
            Generator::MnistCorrupt => (28 * 28, 10),
        }
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        let (input_dim, num_classes) = self.data_shape();
        MlpSpec {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            embedding_dim: self.model.embedding_dim,
            num_classes,
            activation: self.model.activation,
            seed: self.seed,
        }
    }

    pub fn pair_spec(&self) -> DomainPairSpec {
        DomainPairSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    /// Training configuration shared by all regimes; `regime` is set per run.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mmd: self.mmd.clone(),
            ..self.train.clone()
        }
    }

    pub fn assoc(&self) -> &AssocConfig {
        &self.train.assoc
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.regimes.is_empty() {
            return Err(Error::Config("no regimes selected".into()));
        }
        self.mlp_spec().validate().map_err(wrap)?;
        self.train_config().validate().map_err(wrap)?;
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        match self.data.generator {
            Generator::TwoMoons | Generator::GaussianGrid => {
                if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.data.rotation) {
                    return Err(Error::Config("data.rotation must lie in [0, pi/2]".into()));
                }
            }
            Generator::MnistCorrupt => {
                if self.data.mnist_dir.is_none() {
                    return Err(Error::Config("mnist_corrupt needs data.mnist_dir".into()));
                }
            }
        }
        if self.data.generator == Generator::GaussianGrid && self.data.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be >= 2".into()));
        }
        if !(self.data.noise_std >= 0.0) {
            return Err(Error::Config("data.noise_std must be nonnegative".into()));
        }
        let (_, classes) = self.data_shape();
        let per_class_supply = self.data.train_samples / classes;
        if per_class_supply < self.train.per_class {
            return Err(Error::Config(format!(
                "train.per_class {} exceeds the {} samples available per class",
                self.train.per_class, per_class_supply
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let cfg = ExperimentConfig::parse(
            "# header\n\
             seed = 7\n\
             regime = source_only, da_assoc   # two of them\n\
             data.translation = 0.5, -1\n\
             model.hidden_dims = 64,64\n\
             assoc.visit_weight = 0.25\n\
             mmd.estimator = unbiased\n\
             mmd.use_median_heuristic = false\n\
             mmd.fixed_bandwidth = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.regimes, vec![Regime::SourceOnly, Regime::DaAssoc]);
        assert_eq!(cfg.data.translation, [0.5, -1.0]);
        assert_eq!(cfg.model.hidden_dims, vec![64, 64]);
        assert_eq!(cfg.train.assoc.visit_weight, 0.25);
        assert_eq!(cfg.mmd.fixed_bandwidth, Some(2.0));
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.mlp_spec().seed, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::parse("train.steps = 5\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(ExperimentConfig::parse("seed = minus one").is_err());
        assert!(ExperimentConfig::parse("regime = sideways").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
        assert!(ExperimentConfig::parse("data.translation = 1,2,3").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("regime=source_only").unwrap();
        assert_eq!(cfg.regimes, vec![Regime::SourceOnly]);
        cfg.apply_override("regime = all").unwrap();
        assert_eq!(cfg.regimes.len(), 4);
        assert!(cfg.apply_override("regime").is_err());
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.train.assoc_delay_steps = cfg.train.total_steps + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.train.per_class = 501;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.data.generator = Generator::MnistCorrupt;
        assert!(cfg.validate().is_err());
        assert_eq!(cfg.data_shape(), (784, 10));
    }
}
