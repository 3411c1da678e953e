//! Modality-reliability-guided weight calibration for late-fusion
//! multimodal recommendation.
//!
//! A backbone produces one user/item embedding pair per modality; their dot
//! products are fused into a final rating with per-item softmax weights.
//! Training runs in two stages: BPR with summed fusion, then weighted
//! fusion with a calibration loss that pulls each item pair's weights
//! toward the modalities whose ratings agreed with the ranking objective.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;

pub use data::{
    load_interactions, load_modality_features, InteractionDataset, ModalityFeatureTable, Split,
    Triplet,
};
pub use error::{MargoError, Result};
pub use eval::{evaluate, EvalReport};
pub use losses::{LossConfig, ReliabilitySignal};
pub use model::{init_params, Gradients, ModelParams, Stage};
pub use optim::{backward, AdamState, SignalGradient};
pub use rng::seeded;
pub use synth::{generate, SyntheticSpec};
pub use train::{run_variant, Hyperparams, TrainLog, Variant};
