//! Pose refinement by conditional denoising diffusion.
//!
//! A noise schedule corrupts clean poses toward an isotropic Gaussian
//! ([`forward_sample`]); a graph-convolutional denoiser predicts the
//! injected noise given the step index and the conditioning embeddings
//! ([`DenoiserSpec`]); and the reverse process starts from a coarse pose
//! estimate instead of pure noise, walking back to a refined pose
//! ([`sample_pose`]). Training minimizes noise-prediction error plus a
//! weighted limb-length penalty ([`diffusion_loss`]).

pub mod denoiser;
pub mod sampler;
pub mod schedule;

use crate::cond::CondError;
use crate::nn::NnError;
use crate::skeleton::{Pose, PoseError, JOINT_COUNT};
use ndarray::Array2;
use thiserror::Error;

pub use denoiser::{sinusoidal_step_embedding, DenoiserSpec, NoisePredictor, DENOISER_BLOCKS};
pub use sampler::{diffusion_loss, draw_training_noise, sample_pose, HypothesisSet, LocalRefresh};
pub use schedule::{
    draw_noise, forward_sample, forward_sample_rows, forward_step, make_schedule, predict_clean,
    reverse_step, reverse_step_rows, DiffusionSchedule, SamplerMode, ScheduleMode,
};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad noise schedule: {0}")]
    BadSchedule(String),
    #[error("diffusion step {k} outside 1..={steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("bad diffusion config: {0}")]
    BadConfig(String),
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Cond(#[from] CondError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

/// Joint coordinates of one pose as a `(17, 3)` matrix.
pub fn pose_rows(pose: &Pose) -> Array2<f64> {
    let mut rows = Array2::<f64>::zeros((JOINT_COUNT, 3));
    for (j, joint) in pose.joints().iter().enumerate() {
        for (axis, &v) in joint.iter().enumerate() {
            rows[(j, axis)] = v;
        }
    }
    rows
}

/// Reinterpret a `(17, 3)` matrix as joint coordinates.
pub fn rows_to_joints(rows: &Array2<f64>) -> [[f64; 3]; JOINT_COUNT] {
    assert_eq!(rows.raw_dim(), ndarray::Dim([JOINT_COUNT, 3]), "expected one pose of 17 rows");
    let mut joints = [[0.0f64; 3]; JOINT_COUNT];
    for (j, joint) in joints.iter_mut().enumerate() {
        for (axis, v) in joint.iter_mut().enumerate() {
            *v = rows[(j, axis)];
        }
    }
    joints
}
