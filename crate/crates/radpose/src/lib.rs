//! Desk-scale mmWave radar human pose estimation sandbox.
//!
//! The crate covers the full loop: a seeded scene simulator that renders
//! noisy radar point clouds from synthetic 17-joint motion, preprocessing
//! into a binary dataset format, a conditional diffusion model that refines
//! coarse poses using global, local, structural and temporal radar context,
//! and the training / inference / evaluation harness plus the `radpose` CLI.
//!
//! All numerics are f64 and every random draw flows from an explicit seed;
//! a pipeline run is bit-reproducible on the same build.

pub mod skeleton;
pub mod metrics;
pub mod radar;
pub mod dataset;
pub mod nn;
pub mod cond;
pub mod diffusion;
pub mod harness;
