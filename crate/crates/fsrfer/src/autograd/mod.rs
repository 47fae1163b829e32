//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Design notes:
//! - Eager evaluation: every op computes its value immediately and records
//!   its parents, forming a DAG of [`Var`] nodes.
//! - Backward passes are themselves built out of `Var` ops, so gradients can
//!   be differentiated again (`create_graph`). This is what makes the
//!   gradient-norm penalty of the critic trainable: the penalty is a function
//!   of an input gradient, and its parameter gradient needs grad-of-grad.
//! - Nodes whose parents all have `requires_grad == false` drop their parent
//!   links entirely, so inference-mode code pays no graph-retention cost.
//! - Everything is `f64`. This repo trades speed for checkable numerics
//!   (central finite differences at step 1e-5 are meaningless in `f32`).

mod engine;
pub mod gradcheck;
pub mod nn;
pub mod ops;

pub use engine::{grad, Var};

#[cfg(test)]
mod tests;
