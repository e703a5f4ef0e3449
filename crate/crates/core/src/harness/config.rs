//! Experiment configuration, read from TOML.
//!
//! ```toml
//! kind = "ae_backdoor"
//! seed = 7
//! out_dir = "runs/ae-fixed"
//!
//! [dataset]
//! source = "idx"          # or "synth"
//! root = "data/mnist"     # optional, falls back to $BACKDOOR_LAB_DATA
//! train_limit = 20000     # optional
//!
//! [trigger]
//! kind = "image_patch"
//! corner = "top_left"
//! size = 5
//! color = [1.0]
//!
//! [target]
//! kind = "fixed_image"    # or "inverse", "distribution"
//! image_index = 0         # index into the test split
//!
//! [train]
//! epochs = 20
//! batch_size = 64
//! poison_fraction = 0.5
//! ```

use std::path::{Path, PathBuf};

use bdlab_tensor::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::autoencoder::LossKind;
use crate::backdoor::TriggerSpec;
use crate::gan::DEFAULT_NOISE_DIM;
use crate::metrics::DEFAULT_GAN_SAMPLES;

use super::HarnessError;

pub const DATA_ENV: &str = "BACKDOOR_LAB_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AeClean,
    AeBackdoor,
    GanClean,
    GanBackdoor,
}

impl ExperimentKind {
    pub fn is_gan(self) -> bool {
        matches!(self, Self::GanClean | Self::GanBackdoor)
    }

    pub fn is_backdoor(self) -> bool {
        matches!(self, Self::AeBackdoor | Self::GanBackdoor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// MNIST-layout IDX files under `root`.
    Idx {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Seeded synthetic rectangles.
    Synth {
        train_count: usize,
        test_count: usize,
        height: usize,
        width: usize,
    },
}

impl DatasetSpec {
    /// The IDX directory: the configured root, else `$BACKDOOR_LAB_DATA`.
    pub fn idx_root(&self) -> Result<Option<PathBuf>, HarnessError> {
        match self {
            Self::Synth { .. } => Ok(None),
            Self::Idx { root: Some(r), .. } => Ok(Some(r.clone())),
            Self::Idx { root: None, .. } => std::env::var_os(DATA_ENV)
                .map(|r| Some(PathBuf::from(r)))
                .ok_or_else(|| HarnessError::Validation(format!("dataset root unset and ${DATA_ENV} not defined"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    /// One image of the test split.
    FixedImage { image_index: usize },
    Inverse,
    /// The training images whose label is in `labels`.
    Distribution { labels: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_poison")]
    pub poison_fraction: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Defaults: Adam(1e-3) for autoencoders, Adam(2e-4, 0.5, 0.999) for GANs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "one")]
    pub d_steps: usize,
    #[serde(default = "one")]
    pub g_steps: usize,
}

fn default_poison() -> f64 {
    0.5
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

fn default_noise_dim() -> usize {
    DEFAULT_NOISE_DIM
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_extractor_epochs")]
    pub extractor_epochs: usize,
    #[serde(default = "default_min_accuracy")]
    pub extractor_min_accuracy: f64,
    /// Side of the square sample grids.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Also train a clean GAN on the target distribution as the backdoor-error
    /// baseline.
    #[serde(default)]
    pub target_baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            extractor_epochs: default_extractor_epochs(),
            extractor_min_accuracy: default_min_accuracy(),
            grid: default_grid(),
            target_baseline: false,
        }
    }
}

fn default_samples() -> usize {
    DEFAULT_GAN_SAMPLES
}

fn default_extractor_epochs() -> usize {
    3
}

fn default_min_accuracy() -> f64 {
    0.9
}

fn default_grid() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetConfig>,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The trigger, or the kind's default: a white 5×5 patch for
    /// autoencoders, the last noise component at −100 for GANs.
    pub fn trigger(&self) -> TriggerSpec {
        self.trigger.clone().unwrap_or_else(|| {
            if self.kind.is_gan() {
                TriggerSpec::last_noise()
            } else {
                TriggerSpec::white_patch()
            }
        })
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.train.optimizer.unwrap_or_else(|| {
            if self.kind.is_gan() {
                OptimizerConfig::gan_default()
            } else {
                OptimizerConfig::adam(1e-3)
            }
        })
    }

    /// Kind-consistency checks that need no data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Validation(msg));
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return fail("train.epochs and train.batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.poison_fraction) {
            return fail(format!("train.poison_fraction {} outside [0, 1]", self.train.poison_fraction));
        }
        if self.eval.n_samples < 2 || self.eval.grid == 0 {
            return fail("eval.n_samples must be at least 2 and eval.grid positive".into());
        }
        let trigger = self.trigger();
        match (self.kind.is_gan(), trigger.is_image_patch()) {
            (true, true) => return fail(format!("{:?} needs a noise_component trigger", self.kind)),
            (false, false) => return fail(format!("{:?} needs an image_patch trigger", self.kind)),
            _ => {}
        }
        if self.kind.is_gan() {
            trigger.validate_for_noise(self.train.noise_dim).map_err(|e| HarnessError::Validation(e.to_string()))?;
        }
        match (self.kind, &self.target) {
            (ExperimentKind::AeBackdoor | ExperimentKind::GanBackdoor, None) => {
                fail(format!("{:?} needs a [target] section", self.kind))
            }
            (ExperimentKind::AeClean | ExperimentKind::AeBackdoor, Some(TargetConfig::Distribution { .. })) => {
                fail("autoencoders take a fixed_image or inverse target".into())
            }
            (ExperimentKind::GanClean | ExperimentKind::GanBackdoor, Some(TargetConfig::Inverse)) => {
                fail("GANs take a distribution or fixed_image target".into())
            }
            (_, Some(TargetConfig::Distribution { labels })) if labels.is_empty() => {
                fail("distribution target needs at least one label".into())
            }
            _ => Ok(()),
        }
    }
}
