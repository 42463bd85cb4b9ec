//! Dense tensors, a small reverse-mode tape and the Adam optimizer.
//!
//! Everything here is deterministic: reductions run in a fixed order and no
//! kernel splits a sum across threads, so identical inputs give bit-identical
//! outputs.

mod adam;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{argmax_token, cosine_similarity, kl_divergence, log_softmax_slice, softmax, softmax_slice, top_k_indices};
pub use tape::{grad_fn, GradFn, Gradients, KlDirection, Tape, Var};
pub use tensor::Tensor;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type. Implemented for `f32` (training and inference)
/// and `f64` (gradient checks).
pub trait Real: Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + 'static {
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
