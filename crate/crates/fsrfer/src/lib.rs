//! Feature-level super-resolution for facial expression recognition.
//!
//! The crate trains a fixed expression classifier on high-resolution faces,
//! then trains an adversarial feature-space super-resolution generator that
//! maps low-resolution deep features onto the high-resolution feature
//! manifold, so the frozen classifier keeps its accuracy on low-resolution
//! inputs. Everything runs on the CPU in f64 with deterministic seeding.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod pipeline;
pub mod spd;
pub mod util;

pub use error::{Error, Result};
