//! Dense arithmetic and the gate-only gradient tape.

mod tape;
mod tensor;

pub use tape::{clip_loss_and_grad, GradTape, Mat, NodeId};
pub use tensor::{
    dot, gelu, gelu_f32, gelu_grad, layer_norm, normalize_in_place, softmax_rows, Tensor2,
};

pub(crate) use tensor::layer_norm_in_place;

/// Rows whose mass after column scaling falls below this snap to one-hot on
/// the class token.
pub const DEGENERATE_ROW_SUM: f64 = 1e-12;

/// LayerNorm epsilon used throughout the encoder.
pub const LN_EPS: f32 = 1e-5;
