//! Dense double-precision tensors with a reverse-mode tape.
//!
//! Everything the toy transformer needs: matrix products, row-wise layer
//! norm, GELU, fused multi-head attention, embeddings and a masked
//! cross-entropy. Parameters live in a [`ParamStore`] and are bound into a
//! [`Graph`] per step through a [`Session`].

mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::{softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("oracle error: {0}")]
    Oracle(String),
}
