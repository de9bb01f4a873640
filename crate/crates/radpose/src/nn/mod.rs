//! Differentiable building blocks and point-set utilities.
//!
//! The numeric core is a reverse-mode tape over `ndarray` matrices
//! ([`tape`]); model layers ([`layers`], [`graph`], [`temporal`]) are thin
//! builders over it that bind named parameters from a [`params::ParameterStore`].
//! Every parametric forward is covered by the finite-difference gradient
//! contract in [`gradcheck`]. Point-set utilities ([`pointset`]) are pure
//! and operate outside the tape: neighborhood structure is data, not a
//! differentiated quantity.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod pointset;
pub mod tape;
pub mod temporal;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("feature dim {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
    #[error("requested {count} anchors from {available} valid points")]
    NotEnoughPoints { count: usize, available: usize },
    #[error("point cloud has no valid points")]
    EmptyCloud,
    #[error("invalid graph: {0}")]
    BadGraph(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
}
