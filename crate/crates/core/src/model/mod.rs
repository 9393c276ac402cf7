//! Network assembly: shallow conv, groups of attention + mixture-of-experts
//! blocks, pixel-shuffle upsampler, and the training loop.

mod block;
mod check;
mod config;
mod network;
pub mod train;

pub use block::{FeedForward, S2mlBlock};
pub use check::{condition_for_gradcheck, is_post_norm_gain, model_grad_check, CONDITIONING_SCALE, GRADCHECK_EPS};
pub use config::{AttentionSettings, ModelConfig};
pub use network::{loss_and_grad, loss_only, padded_side, upsample_stages, ForwardOutput, Group, Model, Swin2Mose};
pub use train::{Adam, AdamConfig, CheckpointMeta, TrainState};
