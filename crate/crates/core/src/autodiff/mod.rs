//! Dense tensors with a closed operator set and reverse-mode differentiation.
//!
//! Operators: same-size conv2d (3×3 or 1×1), 2×2 max pooling, ×2 nearest upsampling,
//! channel concatenation, relu, channel softmax, guarded log, elementwise
//! add/sub/mul/pow, sum, mean, per-channel bias, masking by a 0/1 tensor, scalar
//! scale/offset and a gradient stop.

mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::{grad_check, relative_error, worst};
pub use graph::{Bindings, Gradients, Graph, NodeId, LOG_FLOOR};
pub use tensor::{Precision, Scalar, Tensor};
