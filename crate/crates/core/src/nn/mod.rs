//! Minimal tensor kernels with analytic backward passes for the fixed
//! classifier architectures: affine layers, softmax, layer/RMS
//! normalization, multi-head attention with grouped-query support and
//! masking, rotary embeddings, GELU/SwiGLU feed-forward blocks, and a
//! finite-difference gradient checker.
//!
//! Everything runs in double precision. Gradients are hand-derived per
//! layer for the closed graph (no general autodiff): each layer's
//! `forward_train` returns a cache, and `backward` consumes that cache and
//! the upstream gradient, accumulating parameter gradients in place.

mod gradcheck;
mod layers;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use layers::{
    dropout_mask, gelu, rope_apply, silu, softmax, softmax_in_place, Affine, AffineCache,
    Attention, AttentionCache, Ffn, FfnCache, FfnKind, Norm, NormCache, NormKind, Rope,
};
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("rotary embeddings require an even head dimension, got {0}")]
    OddRopeDim(usize),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}
