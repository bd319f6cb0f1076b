//! Training hyperparameters and the learning-rate schedule.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{dir::read_dataset, make_toy_dataset, Dataset, Pairing, ToyKind};
use crate::discriminator::{DEFAULT_NDF, MIN_EXTENT};
use crate::error::{Error, Result};
use crate::generators::GeneratorConfig;
use crate::losses::GanMode;
use crate::model::Regime;
use crate::reversible::RetentionMode;
use crate::scalar::DType;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory.
    Toy {
        kind: ToyKind,
        n: usize,
        size: usize,
        seed: u64,
        pairing: Pairing,
    },
    /// A directory written by `make-dataset`.
    Dir { path: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match self {
            DatasetSpec::Toy {
                kind,
                n,
                size,
                seed,
                pairing,
            } => {
                let mut ds = make_toy_dataset(*kind, *n, *size, *seed)?;
                ds.pairing = *pairing;
                ds
            }
            DatasetSpec::Dir { path } => read_dataset(path)?.0,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Every hyperparameter of a training run. Missing keys take the desk-scale
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Generator base width `K`.
    pub width: usize,
    /// Coupling blocks in the core.
    pub depth: usize,
    /// Discriminator base width.
    pub disc_width: usize,
    pub lambda: f64,
    pub regime: Regime,
    /// Epochs at constant learning rate.
    pub epochs: usize,
    /// Epochs of linear decay to zero that follow.
    pub epochs_decay: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: DType,
    pub zero_init: bool,
    pub gan_mode: GanMode,
    pub core_mode: RetentionMode,
    pub dataset: DatasetSpec,
    pub checkpoint_dir: Option<PathBuf>,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width: 8,
            depth: 4,
            disc_width: DEFAULT_NDF,
            lambda: 100.0,
            regime: Regime::Paired,
            epochs: 8,
            epochs_decay: 0,
            lr: 0.0002,
            seed: 0,
            precision: DType::F32,
            zero_init: true,
            gan_mode: GanMode::Nonsaturating,
            core_mode: RetentionMode::Recompute,
            dataset: DatasetSpec::Toy {
                kind: ToyKind::Invert,
                n: 64,
                size: 16,
                seed: 0,
                pairing: Pairing::Paired,
            },
            checkpoint_dir: None,
            checkpoint_every: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.epochs_decay
    }

    pub fn generator_config(&self, image_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            zero_init: self.zero_init,
            mode: self.core_mode,
            ..GeneratorConfig::new(self.width, self.depth, image_size)
        }
    }

    /// Checks ranges that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.disc_width == 0 {
            return Err(Error::invalid("width and disc_width must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if let DatasetSpec::Toy { pairing, .. } = &self.dataset {
            self.check_pairing(*pairing)?;
        }
        Ok(())
    }

    /// Checks the config against a loaded dataset.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        ds.validate()?;
        self.check_pairing(ds.pairing)?;
        let size = ds.image_size()?;
        if size < MIN_EXTENT {
            return Err(Error::invalid(format!(
                "images are {size}x{size}; the discriminator needs at least {MIN_EXTENT}x{MIN_EXTENT}"
            )));
        }
        let channels = |rs: &[crate::data::Raster]| rs.iter().all(|r| r.channels == 3);
        if !channels(&ds.a) || !channels(&ds.b) {
            return Err(Error::invalid("training images must be RGB"));
        }
        self.generator_config(size).validate()
    }

    fn check_pairing(&self, pairing: Pairing) -> Result<()> {
        if self.regime == Regime::Paired && pairing == Pairing::Unpaired {
            return Err(Error::invalid("regime is paired but the dataset is unpaired"));
        }
        Ok(())
    }
}

/// Learning rate of `epoch`: constant for `epochs`, then linear decay that
/// reaches 0 at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs() {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs()
        )));
    }
    if epoch < cfg.epochs {
        return Ok(cfg.lr);
    }
    let into = (epoch - cfg.epochs + 1) as f64;
    Ok(cfg.lr * (1.0 - into / cfg.epochs_decay as f64))
}
