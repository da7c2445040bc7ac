//! RoI student: a truncated copy of the teacher backbone whose last `R`
//! blocks are fine-tuned to predict pseudo-label maps.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::LabelingOptions;
pub use model::{ModelDims, StudentModel, Transformer};
pub use optim::OptimConfig;
pub use train::{distill_train, load_checkpoint, save_checkpoint, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Teacher depth `L`.
    pub depth: usize,
    /// Frozen blocks `B`.
    pub frozen: usize,
    /// Trainable blocks `R`; the last one hosts the RoI head.
    pub trainable: usize,
    pub max_turns: usize,
    /// Seed of the backbone initialisation.
    pub teacher_seed: u64,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
    pub optim: OptimConfig,
    /// Used when the manifest carries no stored targets.
    pub labeling: LabelingOptions,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            depth: 6,
            frozen: 3,
            trainable: 3,
            max_turns: 4,
            teacher_seed: 7,
            seed: 1,
            optim: OptimConfig::default(),
            labeling: LabelingOptions::default(),
        }
    }
}

impl StudentConfig {
    pub fn dims(&self, feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            d_model: self.d_model,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            depth: self.depth,
            max_turns: self.max_turns,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims(1).validate()?;
        if self.trainable == 0 || self.frozen + self.trainable > self.depth {
            return Err(Error::Config(format!(
                "need 1 <= R and B + R <= L, got B={} R={} L={}",
                self.frozen, self.trainable, self.depth
            )));
        }
        self.optim.validate()?;
        self.labeling.thresholds.validate()
    }
}
