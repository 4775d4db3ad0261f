//! Dense tensors, reverse-mode differentiation, optimization and
//! precision emulation.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod half;
mod init;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{gelu, softmax_in_place, AttentionProbs, Gradients, Graph, Segment, Var};
pub use half::{quantize_half, round_half, HALF_MAX};
pub use init::{derive_seed, xavier_bound, xavier_uniform_init};
pub use tensor::{Precision, Tensor};
