//! Divide-and-Modulate video adapter at desk scale.
//!
//! A frozen transformer backbone attends inside small spatial (or
//! spatio-temporal) windows, and a trainable selective state-space block turns
//! each layer's attention output into per-token scale and bias sequences that
//! modulate it. Everything runs on a small reverse-mode autodiff engine over
//! `f64` tensors so gradients can be checked against finite differences.

pub mod attention;
pub mod config;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
