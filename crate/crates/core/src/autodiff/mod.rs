//! Reverse-mode automatic differentiation over dynamically built graphs.

pub mod gradcheck;
pub mod ops;
mod var;

pub use var::{Gradients, Var};
