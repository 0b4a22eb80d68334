//! Budgeted dataset distillation with a class-conditional latent denoiser.
//!
//! A small diffusion denoiser is trained on labeled data with two extra
//! min-max terms: one pulls predicted clean latents toward the least similar
//! stored real feature of their class, the other pushes them away from the
//! most similar previously predicted latent. The trained model then fills a
//! surrogate dataset until a generation time budget runs out, and the
//! surrogate is scored by training a small classifier on it.

pub mod array;
pub(crate) mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod minmax;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use array::DenseArray;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{LabeledSet, ToyDatasetSpec};
pub use diffusion::{
    forward_noise, make_step_plan, predict_clean, reverse_sample, NoiseSchedule, StepPlan,
};
pub use error::{Error, Result};
pub use generator::{generate, CostModel, GenBudget, SurrogateDataset};
pub use minmax::{combined_loss, FeatureBuffer, FeatureBuffers, LossBreakdown};
pub use model::{Condition, DenoiserConfig, DenoiserModel, LatentCodec, NoisePredictor};
pub use trainer::{train, TrainConfig, Trainer};
