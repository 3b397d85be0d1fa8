//! Experiment configuration: a strict JSON schema where every omitted field
//! takes its default and every present field is range-checked.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{AugmentationSpec, BlobSpec, DatasetError, NoiseKind, NoiseSpec};
use crate::model::Architecture;
use crate::rng::{derive_seed, tags};
use crate::selection::{Balancing, CutoffParams, QuotaRule};
use crate::ssl::{Hyperparams, SslError, TrainOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {}", path.display())]
    Missing { path: PathBuf },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidType { key: String, message: String },
    #[error("`{key}` out of range: {reason}")]
    OutOfRange { key: String, reason: String },
}

fn out_of_range(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Gaussian-blob train set plus a test set drawn around the same means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub separation: f64,
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 4,
            per_class: 250,
            dims: 8,
            separation: 8.0,
            test_per_class: 100,
        }
    }
}

impl DatasetConfig {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            num_classes: self.num_classes,
            per_class: self.per_class,
            dims: self.dims,
            separation: self.separation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Asymmetric only; defaults to `c -> (c + 1) mod C`.
    pub flip_map: Option<Vec<usize>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            kind: NoiseKind::Symmetric,
            rate: 0.5,
            flip_map: None,
        }
    }
}

/// Widths not implied by the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dim: 64,
            embed_dim: 32,
        }
    }
}

/// Cutoff constants and per-class quota rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub tau: f64,
    pub d_mu: f64,
    pub quota_rule: QuotaRule,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let c = CutoffParams::default();
        SelectionConfig {
            tau: c.tau,
            d_mu: c.d_mu,
            quota_rule: QuotaRule::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    #[default]
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Pipeline components that the ablation study turns off one at a time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Off: class-agnostic selection of the globally lowest divergences.
    pub balancing: Switch,
    /// Off: contrastive weight forced to zero.
    pub contrastive: Switch,
    /// Off: each network selects with its own predictions.
    pub ensemble: Switch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    pub augmentation: AugmentationSpec,
    pub hyperparams: Hyperparams,
    pub arch: ArchConfig,
    pub selection: SelectionConfig,
    pub ablation: AblationFlags,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            noise: NoiseConfig::default(),
            augmentation: AugmentationSpec::default(),
            hyperparams: Hyperparams::default(),
            arch: ArchConfig::default(),
            selection: SelectionConfig::default(),
            ablation: AblationFlags::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON text, then validates. Paths are left as written.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(classify)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        d.blob_spec()
            .validate()
            .map_err(|e| prefixed("dataset", e))?;
        if d.test_per_class == 0 {
            return Err(out_of_range("dataset.test_per_class", "must be >= 1"));
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.rate) {
            return Err(out_of_range(
                "noise.rate",
                format!("{} is outside [0, 1]", n.rate),
            ));
        }
        if let Some(map) = &n.flip_map {
            if map.len() != d.num_classes {
                return Err(out_of_range("noise.flip_map", "needs one entry per class"));
            }
            if map
                .iter()
                .enumerate()
                .any(|(c, &t)| t == c || t >= d.num_classes)
            {
                return Err(out_of_range(
                    "noise.flip_map",
                    "entries must name a different, existing class",
                ));
            }
        }
        self.augmentation
            .validate()
            .map_err(|e| prefixed("augmentation", e))?;
        self.hyperparams.validate().map_err(|e| match e {
            SslError::InvalidHyperparameter { key, reason } => {
                out_of_range(format!("hyperparams.{key}"), reason)
            }
            other => out_of_range("hyperparams", other.to_string()),
        })?;
        if self.arch.hidden_dim == 0 {
            return Err(out_of_range("arch.hidden_dim", "must be >= 1"));
        }
        if self.arch.embed_dim == 0 {
            return Err(out_of_range("arch.embed_dim", "must be >= 1"));
        }
        let c = &self.selection;
        if !(c.tau > 0.0 && c.tau.is_finite()) {
            return Err(out_of_range("selection.tau", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&c.d_mu) {
            return Err(out_of_range("selection.d_mu", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.dataset.dims,
            hidden_dim: self.arch.hidden_dim,
            num_classes: self.dataset.num_classes,
            embed_dim: self.arch.embed_dim,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.noise.kind.clone(),
            rate: self.noise.rate,
            flip_map: self.noise.flip_map.clone(),
            seed: derive_seed(self.seed, &[tags::NOISE]),
        }
    }

    /// Hyperparameters after ablation switches are applied.
    pub fn effective_hyperparams(&self) -> Hyperparams {
        let mut hp = self.hyperparams.clone();
        if !self.ablation.contrastive.is_on() {
            hp.lambda_c = 0.0;
        }
        hp
    }

    pub fn train_options(&self) -> TrainOptions {
        let balancing = if self.ablation.balancing.is_on() {
            Balancing::PerClass(self.selection.quota_rule)
        } else {
            Balancing::Global
        };
        TrainOptions {
            cutoff: CutoffParams {
                tau: self.selection.tau,
                d_mu: self.selection.d_mu,
            },
            balancing,
            ensemble: self.ablation.ensemble.is_on(),
            augmentation: self.augmentation,
        }
    }
}

fn prefixed(section: &str, e: DatasetError) -> ConfigError {
    match e {
        DatasetError::InvalidParameter { name, reason } => {
            out_of_range(format!("{section}.{name}"), reason)
        }
        other => out_of_range(section, other.to_string()),
    }
}

fn classify(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    match inner.classify() {
        serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
            ConfigError::Syntax {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        }
        _ => {
            let message = inner.to_string();
            if let Some(field) = message
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
            {
                let key = if path == "." || path.is_empty() || path.ends_with(field) {
                    path.trim_start_matches('.').to_string()
                } else {
                    format!("{path}.{field}")
                };
                let key = if key.is_empty() {
                    field.to_string()
                } else {
                    key
                };
                ConfigError::UnknownKey { key }
            } else {
                ConfigError::InvalidType { key: path, message }
            }
        }
    }
}

/// Reads, parses and validates a config file; a relative `output_dir` is
/// resolved against the file's directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            ConfigError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if cfg.output_dir.is_relative() {
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    Ok(cfg)
}
