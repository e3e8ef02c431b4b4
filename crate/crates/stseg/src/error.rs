//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the crate, from numeric domain
/// violations to malformed files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice dimensions must be positive, got {height}x{width}")]
    EmptyLattice { height: usize, width: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("operands live on different lattices ({a_height}x{a_width} vs {b_height}x{b_width})")]
    LatticeMismatch {
        a_height: usize,
        a_width: usize,
        b_height: usize,
        b_width: usize,
    },

    #[error("component count mismatch: {a} vs {b}")]
    KMismatch { a: usize, b: usize },

    #[error("row {row} has vanishing total mass and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("matrix is not positive definite (Cholesky failed after jitter)")]
    NotPositiveDefinite,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("component has vanishing responsibility mass ({mass:.3e})")]
    EmptyComponent { mass: f64 },

    #[error("need more than {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("inputs are constant; correlation is undefined")]
    ConstantInput,

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("segmentation file {path} does not cover the image exactly: {msg}")]
    Coverage { path: String, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
