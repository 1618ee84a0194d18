//! Reverse-mode automatic differentiation over dense f64 tensors, sized for
//! small volumetric networks on a CPU.
//!
//! A [`Graph`] is a define-by-run tape; ops append nodes and
//! [`Graph::backward`] replays them in reverse. Parameters live in a
//! [`ParamStore`] and are lifted into a graph through [`Bound`].

#![allow(clippy::needless_range_loop)]

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Ema};
pub use params::{uniform, Bound, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("graph was built without gradient recording")]
    NoGrad,
}

pub type Result<T> = std::result::Result<T, Error>;
