//! Parameter-efficient fine-tuning on a verified numerical core.
//!
//! The crate is organized around five pieces:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation
//!   and a finite-difference gradient oracle.
//! - [`model`]: frozen-base layers, two reference architectures, parameter
//!   budget accounting, and the checkpoint format.
//! - [`adapters`]: the adapter zoo — scale-and-shift, low-rank pairs,
//!   learnable prompt tokens, and scaling adapters that propagate their
//!   factors into the next layer's weights.
//! - [`reparam`]: folding adapters into base weights, equivalence audits,
//!   and the closed-form/regularizer evaluators.
//! - [`train`]: deterministic desk-scale fine-tuning — datasets,
//!   optimizers, schedules, metrics, and multi-method comparisons.

pub mod adapters;
pub mod error;
pub mod model;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{finite_diff_grad, Precision, Tape, Tensor, Var};

// Chapters of the guide double as doc-tests so the book's snippets stay
// compilable against the current API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/merging.md")]
    mod merging {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
