//! Set-prediction training: connected-component targets, Hungarian
//! matching, CE + BCE + Dice loss, decoupled-weight-decay Adam, and the
//! epoch loop with validation and checkpoints.

pub mod checkpoint;
pub mod components;
pub mod hungarian;
pub mod loss;
pub mod optim;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use components::{connected_components, GroundTruthSegments};
pub use hungarian::{hungarian_match, Assignment};
pub use loss::{LossTerms, LossWeights};
pub use optim::AdamW;
pub use trainer::{EpochRecord, Sample, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_class: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub no_object_weight: f64,
    /// Apply the loss to every intermediate decoder step as well.
    pub auxiliary_loss: bool,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Epochs between `last.ckpt` writes; the final epoch is always saved.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 4,
            epochs: 40,
            lambda_class: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            no_object_weight: 0.1,
            auxiliary_loss: true,
            max_steps: None,
            checkpoint_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lambda_class", self.lambda_class),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("no_object_weight", self.no_object_weight),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and checkpoint_every must be at least 1".into(),
            ));
        }
        if self.no_object_weight == 0.0 {
            return Err(Error::Config("no_object_weight must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class: self.lambda_class,
            bce: self.lambda_bce,
            dice: self.lambda_dice,
            no_object: self.no_object_weight,
        }
    }
}
