//! Concrete rule families.

pub mod arch;
pub mod distillation;
pub mod pruning;
pub mod quantization;
pub mod sharing;
pub mod svd;
