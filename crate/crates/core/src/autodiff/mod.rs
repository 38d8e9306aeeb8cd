//! Reverse-mode differentiable computation core: dense affine layers,
//! elementwise nonlinearities, reductions, log-sum-exp, and Adam.
//!
//! Everything on the training path is 64-bit; graph construction and
//! backward are single-threaded per step, read-only parameter snapshots
//! may be evaluated from many threads.

mod adam;
mod matrix;
mod mlp;
mod tape;

pub use adam::AdamState;
pub use matrix::{gemm_acc, matmul, Matrix, Trans};
pub use mlp::{Mlp, MlpSpec};
pub use tape::{log_sum_exp, softplus, Gradients, NodeId, Tape};
