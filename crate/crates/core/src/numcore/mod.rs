//! Dense numerical kernel: matrices, thin SVD, reverse-mode tape and Adam.
//!
//! Everything here is generic over [`Real`] (`f32` or `f64`); the rest of the
//! crate works in `f64` through the aliases at the crate root.

mod adam;
mod init;
mod layout;
mod matrix;
mod scalar;
mod svd;
mod tape;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use init::{normal_matrix, orthogonal, standard_normal};
pub use layout::{Layout, TensorSlot};
pub use matrix::{matmul, Matrix};
pub use scalar::Real;
pub use svd::{thin_svd, ThinSvd, MAX_SWEEPS};
pub use tape::{Gradients, Op, Tape, Var};
