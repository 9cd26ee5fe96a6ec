//! Probabilistic attribute prompts for dense prediction.
//!
//! Class text embeddings are modeled as an equal-weight mixture of `K`
//! diagonal Gaussians, one per learnable class-agnostic attribute prompt.
//! Component means come from a small text encoder; component standard
//! deviations come from a decoder conditioned on the image. Training samples
//! text embeddings from the mixture and scores them against per-position
//! visual features.

pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod mog;
pub mod numcore;
pub mod oracles;
pub mod probdecoder;
pub mod prompts;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossWeights, ScoreMap};
pub use model::{ModelDims, PplModel};
pub use mog::{MogDistribution, SamplingMode};
pub use numcore::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};
pub use synth::{Scene, SceneSpec};
pub use trainer::{Checkpoint, Metrics, TrainConfig, Trainer};
