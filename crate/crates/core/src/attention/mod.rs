//! Shifted-window self-attention with composable positional encodings.

pub mod attn;
pub mod posenc;
pub mod window;

pub use attn::{softmax_rows, AttentionCache, AttentionConfig, AttentionKernel, WindowAttention};
pub use posenc::{log_coords, logcpb_bias, relative_index, rpe_gather, LogCpbNet};
pub use window::{cyclic_shift, cyclic_unshift, shift_mask, window_partition, window_reverse, Grid};
