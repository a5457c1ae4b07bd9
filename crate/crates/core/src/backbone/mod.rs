//! DiT-style denoiser: patch embedding, timestep/label conditioning,
//! adaLN-Zero transformer blocks and the modulated output layer.

mod config;
mod model;
mod params;

pub use config::{ModelConfig, LAYERNORM_EPS};
pub use model::{
    block_forward, init_params, init_specs, label_embedding, modulate, param_specs, patchify, pos_embed_2d,
    timestep_sinusoid, unpatchify, Denoiser, Dit, ModelOutput, Prediction,
};
pub use params::{BoundParams, Init, ParamSpec, ParamStore};
