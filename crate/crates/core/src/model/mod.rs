//! Decoder-only transformer whose every layer can exit through one shared
//! LM head.

mod config;
mod infer;
mod params;
mod train;

pub use config::ModelConfig;
pub use infer::{forward_remainder, forward_step, forward_step_layers, unembed};
pub use params::{LayerParams, ModelParams, INIT_STD};
pub use train::{
    backward, forward_train, forward_with_tape, head_backward, head_forward, DropMask, ForwardTape,
    HeadOutput, HiddenStates, TokenBatch,
};
