//! Run configuration: one struct per pipeline stage, deserialised from the
//! CLI's TOML config files. Every random choice takes an explicit seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::ConfusionMatrix;
use crate::diffmodels::{Activation, ModelKind, ModelSpec, OptimizerConfig};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            kind: self.kind,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            hidden_layers: self.hidden_layers.clone(),
            activation: self.activation,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    /// Rendered glyph corpus (no external files needed).
    Digits {
        n_train: usize,
        n_test: usize,
        seed: u64,
    },
    /// Two Gaussian blobs in the plane.
    Blobs {
        n_train: usize,
        n_test: usize,
        separation: f64,
        std: f64,
        seed: u64,
    },
    /// IDX image/label files, optionally subsampled.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        subsample_n: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptConfig {
    None,
    LabelFlip {
        /// Symmetric flip pairs applied at `rate`; ignored when
        /// `matrix_path` supplies a full confusion table.
        #[serde(default)]
        pairs: Vec<(usize, usize)>,
        #[serde(default = "default_rate")]
        rate: f64,
        seed: u64,
        #[serde(default)]
        matrix_path: Option<PathBuf>,
    },
    SaltPepper {
        target_classes: Vec<usize>,
        #[serde(default = "default_rate")]
        fraction: f64,
        #[serde(default = "default_pixel_rate")]
        pixel_rate: f64,
        seed: u64,
    },
    Gaussian {
        target_classes: Vec<usize>,
        #[serde(default = "default_rate")]
        fraction: f64,
        sigma: f64,
        seed: u64,
    },
    Fgsm {
        target_classes: Vec<usize>,
        #[serde(default = "default_rate")]
        fraction: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        seed: u64,
        /// The victim model trains on the clean data with this independent
        /// seed.
        victim_seed: u64,
    },
}

fn default_rate() -> f64 {
    0.3
}

fn default_pixel_rate() -> f64 {
    0.1
}

fn default_epsilon() -> f64 {
    0.2
}

impl CorruptConfig {
    pub fn target_classes(&self) -> Option<&[usize]> {
        match self {
            CorruptConfig::SaltPepper { target_classes, .. }
            | CorruptConfig::Gaussian { target_classes, .. }
            | CorruptConfig::Fgsm { target_classes, .. } => Some(target_classes),
            _ => None,
        }
    }

    pub fn confusion_matrix(&self, num_classes: usize) -> Result<Option<ConfusionMatrix>> {
        match self {
            CorruptConfig::LabelFlip {
                pairs,
                rate,
                matrix_path,
                ..
            } => {
                if let Some(path) = matrix_path {
                    let text = std::fs::read_to_string(path)?;
                    return Ok(Some(ConfusionMatrix::parse_table(&text)?));
                }
                if pairs.is_empty() {
                    return Err(CoreError::invalid_config(
                        "label-flip needs flip pairs or a confusion matrix table",
                    ));
                }
                Ok(Some(ConfusionMatrix::with_pairs(num_classes, pairs, *rate)?))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub opt: OptimizerConfig,
    /// Damping added to every Fisher solve built on this run's posterior.
    pub damping: f64,
    /// Seed for the parameter initialisation (separate from the shuffle
    /// seed so the two can be varied independently).
    pub init_seed: u64,
    /// Subtract the corrupted training set's mean image from every input
    /// before fitting (corruption itself always happens in raw [0,1]
    /// space). The mean is recorded in the checkpoint manifest.
    pub center_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            opt: OptimizerConfig::default(),
            damping: 1e-4,
            init_seed: 0,
            center_inputs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentifyMethodConfig {
    Ewc,
    LinearDiag,
    LinearCg,
    LinearSa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureFilter {
    /// All misclassified test examples form the failure set.
    All,
    /// Only misclassified members of the corruption target classes do.
    TargetClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifyConfig {
    pub method: IdentifyMethodConfig,
    /// Step size of the linear influence score.
    pub gamma: f64,
    /// When set, the adaptation penalty becomes `2 / (gamma_ewc * N)`;
    /// otherwise the quadratic keeps its plain `N/2` weight.
    pub gamma_ewc: Option<f64>,
    pub query_fraction: f64,
    pub split_seed: u64,
    pub failure_filter: FailureFilter,
    /// Optimiser for the adaptation run behind the penalised score.
    pub adapt: OptimizerConfig,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub sa_depth: usize,
    pub sa_scale: f64,
    pub sa_repeats: usize,
    pub sa_seed: u64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            method: IdentifyMethodConfig::Ewc,
            gamma: 1.0,
            gamma_ewc: None,
            query_fraction: 0.5,
            split_seed: 0,
            failure_filter: FailureFilter::All,
            adapt: OptimizerConfig::default(),
            cg_tol: 1e-6,
            cg_max_iter: 200,
            sa_depth: 500,
            sa_scale: 0.1,
            sa_repeats: 10,
            sa_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum SelectConfig {
    Positive,
    TopK { k: usize },
    TopFraction { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TreatConfig {
    FinetuneRemoval {
        #[serde(default)]
        opt: OptimizerConfig,
    },
    Newton {
        gamma: f64,
    },
    EwcDeletion {
        gamma: f64,
        #[serde(default)]
        opt: OptimizerConfig,
    },
    FinetuneFailures {
        l2_weight: f64,
        #[serde(default)]
        opt: OptimizerConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Artifacts land here; empty means in-memory only.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default = "default_corrupt")]
    pub corrupt: CorruptConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub identify: IdentifyConfig,
    pub select: SelectConfig,
    pub treat: TreatConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_corrupt() -> CorruptConfig {
    CorruptConfig::None
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.to_spec()?;
        self.train.opt.validate()?;
        if !(0.0 < self.identify.query_fraction && self.identify.query_fraction < 1.0) {
            return Err(CoreError::invalid_config(
                "identify.query_fraction must lie strictly between 0 and 1",
            ));
        }
        if self.identify.failure_filter == FailureFilter::TargetClasses
            && self.corrupt.target_classes().is_none()
        {
            return Err(CoreError::invalid_config(
                "failure_filter = target-classes needs a corruption with target classes",
            ));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form, recorded in manifests. The output
    /// location is excluded: the hash identifies the experiment, not where
    /// its artifacts land.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.output = OutputConfig::default();
        let bytes = serde_json::to_vec(&canonical)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
