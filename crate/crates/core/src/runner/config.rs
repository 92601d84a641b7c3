//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LabelColumn, TaskParams};
use crate::error::{Error, Result};
use crate::metrics::ScoreAggregation;
use crate::training::TrainConfig;

/// Where the source and target tasks come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic(TaskParams),
    Csv {
        source_train: PathBuf,
        source_eval: PathBuf,
        target_train: PathBuf,
        target_eval: PathBuf,
        #[serde(default = "default_label")]
        label: LabelColumn,
    },
}

fn default_label() -> LabelColumn {
    LabelColumn::Name("label".into())
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(TaskParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_final: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 0.1,
            lr_final: 0.001,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub threshold: f64,
    pub aggregation: ScoreAggregation,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold: 0.065,
            aggregation: ScoreAggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Model-epochs given to every strategy.
    pub budget: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { budget: 90 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_models: usize,
    /// Hidden layer widths; input and output sizes come from the task.
    pub hidden: Vec<usize>,
    pub task: TaskSource,
    pub pretrain: PretrainConfig,
    pub transfer: TrainConfig,
    pub metrics: MetricsConfig,
    pub compare: CompareConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_models: 5,
            hidden: vec![32, 32],
            task: TaskSource::default(),
            pretrain: PretrainConfig::default(),
            transfer: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            compare: CompareConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The transfer config with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.transfer.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_models < 2 {
            return Err(Error::Config(format!("n_models must be >= 2, got {}", self.n_models)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        if !(p.lr0 > 0.0 && p.lr_final > 0.0 && p.lr0.is_finite() && p.lr_final.is_finite()) {
            return Err(Error::Config("pretrain learning rates must be positive and finite".into()));
        }
        if self.metrics.threshold.is_nan() {
            return Err(Error::Config("metrics.threshold is NaN".into()));
        }
        if let TaskSource::Synthetic(t) = &self.task {
            if t.feature_dim < 2 || t.target_classes < 2 || t.samples_per_class == 0 {
                return Err(Error::Config(
                    "synthetic task needs feature_dim >= 2, target_classes >= 2, samples_per_class >= 1".into(),
                ));
            }
            if t.source_classes % t.target_classes != 0 {
                return Err(Error::Config(format!(
                    "source_classes ({}) must be a multiple of target_classes ({})",
                    t.source_classes, t.target_classes
                )));
            }
            if !(t.noise >= 0.0 && t.noise.is_finite() && t.theta.is_finite()) {
                return Err(Error::Config("noise must be finite and >= 0, theta finite".into()));
            }
        }
        self.transfer.validate()
    }
}
