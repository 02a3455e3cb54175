//! Run configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! identities = 32
//! samples_per_identity = 8
//!
//! [schedule]
//! epochs = 40
//!
//! [loss]
//! variant = "mmcl"
//! delta = 5.0
//!
//! [labels]
//! predictor = "mplp"
//! threshold = 0.6
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::io::read_to_string;
use crate::labels::{Predictor, DEFAULT_KNN_K};
use crate::loss::LossConfig;
use crate::train::{AugmentConfig, TrainSchedule, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width; 0 gives a single affine layer.
    pub hidden: usize,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            output_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Mplp,
    Ss,
    Knn,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub predictor: PredictorKind,
    pub threshold: f64,
    pub knn_k: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Mplp,
            threshold: 0.6,
            knn_k: DEFAULT_KNN_K,
        }
    }
}

impl LabelConfig {
    pub fn predictor(&self) -> Predictor {
        match self.predictor {
            PredictorKind::Mplp => Predictor::Mplp {
                threshold: self.threshold,
            },
            PredictorKind::Ss => Predictor::SimilarityScore {
                threshold: self.threshold,
            },
            PredictorKind::Knn => Predictor::Knn { k: self.knn_k },
            PredictorKind::Single => Predictor::SingleLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Leading samples of each test identity used as queries.
    pub queries_per_identity: usize,
    /// KNN size for the label-quality curve.
    pub curve_knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            queries_per_identity: 4,
            curve_knn_k: DEFAULT_KNN_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub labels: LabelConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `"default"` selects the built-in configuration.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        Self::from_toml(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.model.output_dim == 0 {
            return Err(Error::config("model.output_dim must be positive"));
        }
        if !(self.labels.threshold > -1.0 && self.labels.threshold < 1.0) {
            return Err(Error::config("labels.threshold must lie in (-1, 1)"));
        }
        if self.labels.knn_k == 0 || self.eval.curve_knn_k == 0 {
            return Err(Error::config("KNN sizes must be positive"));
        }
        if self.data.test_identities > 0 && self.eval.queries_per_identity >= self.data.test_samples_per_identity {
            return Err(Error::config(
                "eval.queries_per_identity must leave gallery samples for every test identity",
            ));
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            schedule: self.schedule.clone(),
            loss: self.loss,
            predictor: self.labels.predictor(),
            augment: self.augment,
        }
    }
}
