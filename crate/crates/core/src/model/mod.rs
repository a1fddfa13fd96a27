//! The LT-ViT model: configuration, parameters and forward pass.

mod config;
mod forward;
mod params;
mod patch;

pub use config::ModelConfig;
pub use forward::{
    embed, forward, predict_heads, stack_patches, AttentionRecord, ForwardOptions,
    ForwardOutput, QueryToken,
};
pub use params::{LabelParams, Parameters, LABEL_PARAM_PREFIX};
pub use patch::{patchify, unpatchify};

pub(crate) use params::derive_seed;
