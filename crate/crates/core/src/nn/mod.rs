//! A small neural toolkit for the position detector.
//!
//! Layers work on row-major `f64` buffers and carry hand-written backward
//! passes; there is no general autograd. Weights are stored as `f32`.

pub mod adam;
pub mod flops;
pub mod io;
pub mod layers;
pub mod model;

pub use adam::{adam_step, adam_update, AdamState};
pub use flops::{attn_flops, conv_flops, fc_flops, flops_estimate, FlopsReport, LayerFlops};
pub use io::{load_weights, save_weights};
pub use layers::{attention, build_masks, multi_head, patch_embed, position_loss, position_loss_grad, AttentionMask};
pub use model::{CoarseNet, MapInput, Mode, ModelConfig, ModelWeights, NamedTensor, PositionDetector, Regressor};
