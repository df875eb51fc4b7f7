//! Selective state-space sequence mixers (S4D, Mamba, Mamba-2, Mamba-Δᵀ),
//! closed-form weight constructions for recall tasks, sensitivity and
//! approximation analysis, and a small reverse-mode training stack.

pub mod analysis;
pub mod cli;
pub mod constructions;
pub mod error;
pub mod mixers;
pub mod tasks;
pub mod tensor_core;
pub mod training;

pub use error::{Error, Result};
