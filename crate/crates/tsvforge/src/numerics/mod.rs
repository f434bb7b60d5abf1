//! Minimal tensor algebra and reverse-mode differentiation.
//!
//! Everything the encoder and the training losses need, nothing more:
//! dense row-major f64 tensors, a handful of primitives (matmul, dilated
//! 1-D convolution, GELU, max-pooling, the contrastive losses), and a
//! tape that records them for a single backward pass.

mod conv;
mod tape;
mod tensor;

pub use conv::{conv1d_dilated, maxpool1d_time};
pub use tape::{GradTape, Gradients, NodeId};
pub(crate) use tape::masked_mse_value;
pub use tensor::Tensor;
