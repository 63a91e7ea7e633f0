//! Budgeted model-efficiency optimization built from knobs, meters and rules.

pub mod calculus;
pub mod engine;
pub mod error;
pub mod harness;
pub mod meters;
pub mod methods;
pub mod policy;
pub mod tensor;
pub mod train;

pub use error::{KmrError, Result};
