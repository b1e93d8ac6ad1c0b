//! Crate-wide error type.

use std::fmt;

/// Errors produced by solvers, generators, file formats and training.
#[derive(Debug)]
pub enum CoreError {
    /// Invalid argument or violated precondition, with a description.
    InvalidArg(String),
    /// Grid step too coarse for the requested wavelength/material.
    Resolution {
        dl: f64,
        lambda: f64,
        eps_max: f64,
    },
    /// Factorization hit a zero (or effectively zero) pivot.
    Singular(String),
    /// A solve finished above its residual target.
    NoConvergence { achieved: f64, target: f64 },
    /// Array dimensions do not agree.
    ShapeMismatch(String),
    /// File does not start with the expected magic bytes.
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    /// File format version is not supported.
    VersionMismatch { expected: u32, found: u32 },
    /// Stream ended early: `expected` vs `found` is in records or bytes
    /// depending on context.
    Truncated { expected: u64, found: u64 },
    /// Stored checksum does not match the payload.
    ChecksumMismatch { expected: u32, found: u32 },
    /// Checkpoint and dataset (or model and grid) cannot be combined.
    Incompatible(String),
    /// A non-finite value appeared where finite math is required.
    NonFinite(String),
    /// I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::Resolution { dl, lambda, eps_max } => write!(
                f,
                "grid step {dl:.3e} m too coarse for lambda {lambda:.3e} m \
                 (eps_max {eps_max}); need dl <= lambda / (10 sqrt(eps_max))"
            ),
            CoreError::Singular(msg) => write!(f, "singular system: {msg}"),
            CoreError::NoConvergence { achieved, target } => write!(
                f,
                "solver did not reach residual target {target:.3e} (achieved {achieved:.3e})"
            ),
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            CoreError::VersionMismatch { expected, found } => {
                write!(f, "unsupported format version {found} (expected {expected})")
            }
            CoreError::Truncated { expected, found } => {
                write!(f, "truncated stream: expected {expected}, found {found}")
            }
            CoreError::ChecksumMismatch { expected, found } => {
                write!(f, "checksum mismatch: stored {expected:#010x}, computed {found:#010x}")
            }
            CoreError::Incompatible(msg) => write!(f, "incompatible inputs: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            CoreError::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CoreError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(err: std::io::Error) -> Self {
        CoreError::Io(err)
    }
}
