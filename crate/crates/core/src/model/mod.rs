//! Desk-scale networks: a fixed feature pyramid, an MLP critic trained with a
//! gradient-penalized Wasserstein objective, and a neighborhood voxel classifier.

pub mod checkpoint;
pub mod critic;
pub mod features;
pub mod segmenter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossError, LossMode, LossWeights};

pub use checkpoint::{decode_critic, decode_segmenter, encode_critic, encode_segmenter, CheckpointError};
pub use critic::{
    clipped_norm, critic_forward, critic_input_gradient, critic_param_gradient, train_critic, wd_objective_gradient,
    CriticParams, Layer,
};
pub use features::{extract_features, FeatureVector, FEATURE_LEN};
pub use segmenter::{
    patch_loss_gradient, segmenter_predict, segmenter_voxel_forward, segmenter_voxel_gradients, train_segmenter,
    SegmenterParams, TrainingSample,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty patch")]
    EmptyPatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no labeled samples to train on")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Patches per SGD step.
    pub batch_size: usize,
    /// Edge length of the cubic training patches.
    pub patch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    pub critic_steps: usize,
    pub critic_learning_rate: f64,
    pub max_norm: f64,
    pub binarize_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 15,
            batch_size: 4,
            patch_size: 16,
            seed: 0,
            loss_mode: LossMode::Eq5,
            weights: LossWeights::default(),
            critic_steps: 50,
            critic_learning_rate: 0.01,
            max_norm: 10.0,
            binarize_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return bad("batch_size and patch_size must be positive");
        }
        if self.max_norm.is_nan() || self.max_norm <= 0.0 {
            return bad("max_norm must be positive");
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad("binarize_threshold must lie in (0, 1)");
        }
        self.weights.validate().map_err(ModelError::Loss)
    }
}
