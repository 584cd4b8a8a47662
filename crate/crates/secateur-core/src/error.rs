//! Error type shared across the core crate.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes incompatible; message names both shapes.
    Shape(String),
    /// A numeric precondition failed (domain errors, invalid hyperparameters).
    Invalid(String),
    /// NaN/Inf surfaced where finite values are required (diverged run, bad grads).
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape mismatch: {m}"),
            CoreError::Invalid(m) => write!(f, "invalid argument: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}
