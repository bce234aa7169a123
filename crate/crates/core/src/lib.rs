//! Two-stage domain-invariant representation learning with an unlabeled
//! intermediate domain, reverse-validation model selection, and the rotated
//! two-moons benchmark.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod ot;
pub mod rv;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
