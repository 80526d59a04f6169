//! Lifted feed-forward networks trained through explicit optimization of
//! Fenchel-Young network potentials, with relaxed and adversarial
//! optimal-value training objectives.

pub mod data;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod exact;
pub mod inference;
pub mod network;
pub mod objectives;
pub mod potential;
pub mod trainer;

pub use error::{Error, Result};
