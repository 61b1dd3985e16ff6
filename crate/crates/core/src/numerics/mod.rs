//! Dense tensors, reverse-mode autodiff and the attention-adjacent kernels.

pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use kernels::{gelu, matmul, rms_norm, rope_apply, softmax_rows, transpose, Position, RopeLayout};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
