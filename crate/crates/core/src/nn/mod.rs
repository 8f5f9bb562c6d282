//! Minimal CPU neural-network kernels with hand-written backward passes.
//!
//! Every layer is split into a forward pass that returns a cache and a
//! backward pass that consumes it, so the same weights can be run over
//! several independent batches (e.g. two augmented views) before a single
//! optimizer step.

mod activation;
mod conv;
mod gemm;
mod linear;
mod norm;
mod tensor;

pub use activation::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};
pub use conv::Conv3d;
pub use gemm::sgemm;
pub use linear::Linear;
pub use norm::{BatchNorm3d, BnCache};
pub use tensor::{Param, Tensor};

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
