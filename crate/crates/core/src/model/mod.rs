//! Decoder-only transformer: config, weights, and hooked forward pass.

pub mod config;
pub mod forward;
pub mod weights;

pub use config::ModelConfig;
pub use forward::{
    forward_with_hooks, rms_norm, unembed_logits, FinalNorm, ForwardOutput, HiddenState,
    HookAction, Position, Transform,
};
pub use weights::{load_weights, random_init, read_config, tensor_layout, LayerWeights, ModelWeights};
