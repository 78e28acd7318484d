//! The four-stage backbone: variant registry, parameter layout, blocks and
//! the parameter/compute audit.

mod audit;
mod blocks;
mod config;
mod layout;
mod network;

pub use audit::{count_flops, count_params};
pub use blocks::{
    downsample, guided_block, hybrid_block, mlp, norm, patch_embed, vanilla_block, BlockVars, ConvVars, DropPath,
    MlpVars, NormVars, LN_EPS,
};
pub use config::{build_variant, ModelConfig, ScaleMode, StageConfig};
pub use layout::{Init, ParamSpec};
pub use network::{ForwardOutput, Model};
