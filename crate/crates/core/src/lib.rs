//! Residual face-attribute network toolkit.

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ops;
pub mod multihead;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
