//! Label-token vision transformer (LT-ViT) at desk scale.
//!
//! Image tokens and learnable label tokens share one encoder; in the final
//! blocks label tokens read from image tokens but never the other way round,
//! and each label token feeds its own binary head.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod viz;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Dataset, Sample};
pub use error::{Error, Result};
pub use model::{ModelConfig, Parameters};
pub use nn::AttentionMode;
pub use tensor::{Gradients, Tape, Tensor};
pub use train::{EvalReport, OptimState, TrainConfig};
