//! Point-cloud encoder: sampled anchors with ball-grouped neighborhoods,
//! a shared per-point MLP, and max-aggregation into one token per anchor.
//!
//! Coordinates are re-centered at the frame's valid-point centroid before
//! featurization, so tokens carry body-relative position (the pose targets
//! are pelvis-relative and the absolute subject location is uninformative).
//! Group membership localizes each token; members keep their re-centered
//! coordinates rather than anchor-relative offsets for the same reason.

use super::CondError;
use crate::dataset::PaddedFrame;
use crate::nn::layers::MlpSpec;
use crate::nn::params::{ParameterStore, TapeSession};
use crate::nn::pointset::{ball_query, fps};
use crate::nn::tape::TensorId;
use crate::nn::NnError;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Input features per grouped point: re-centered xyz plus radial
/// velocity, energy, and amplitude.
pub const POINT_FEATURES: usize = 6;

/// Centroid of a frame's valid points, if any.
pub fn valid_centroid(frame: &PaddedFrame) -> Option<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (slot, &keep) in frame.valid_mask().iter().enumerate() {
        if keep {
            for axis in 0..3 {
                sum[axis] += f64::from(frame.points()[(slot, axis)]);
            }
            count += 1;
        }
    }
    (count > 0).then(|| sum.map(|s| s / count as f64))
}

/// One frame's grouped, featurized point cloud, ready for the shared MLP.
#[derive(Debug, Clone)]
pub struct PcGroups {
    /// Number of anchors (`P`).
    pub anchor_count: usize,
    /// `(P·ball_samples, 6)`, group-major.
    pub features: Array2<f64>,
    /// Anchor positions in the original (sensor) frame.
    pub anchor_positions: Vec<[f64; 3]>,
    /// Per anchor, true when no valid point fell inside the ball radius.
    pub empty_groups: Vec<bool>,
    /// Valid-point centroid the coordinates were re-centered at.
    pub centroid: [f64; 3],
}

/// FPS → ball query → shared MLP → per-group max.
#[derive(Debug, Clone)]
pub struct PcEncoderSpec {
    pub d_point: usize,
    pub fps_stride: usize,
    pub ball_radius_m: f64,
    pub ball_samples: usize,
    pub min_valid_points: usize,
    embed: MlpSpec,
}

impl PcEncoderSpec {
    pub fn new(
        prefix: impl Into<String>,
        d_point: usize,
        fps_stride: usize,
        ball_radius_m: f64,
        ball_samples: usize,
        min_valid_points: usize,
        dropout_p: f64,
    ) -> Self {
        let prefix = prefix.into();
        Self {
            d_point,
            fps_stride,
            ball_radius_m,
            ball_samples,
            min_valid_points: min_valid_points.max(1),
            embed: MlpSpec::new(format!("{prefix}.embed"), POINT_FEATURES, d_point, d_point, dropout_p),
        }
    }

    pub fn from_config(cfg: &super::CondConfig) -> Result<Self, CondError> {
        cfg.validate()?;
        Ok(Self::new(
            "pc",
            cfg.d_point,
            cfg.fps_stride,
            cfg.ball_radius_m,
            cfg.ball_samples,
            cfg.min_valid_points,
            cfg.dropout,
        ))
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.embed.init(store, rng)
    }

    /// Sample anchors and featurize their neighborhoods. Fails when the
    /// frame has fewer valid points than the configured minimum.
    pub fn prepare(&self, frame: &PaddedFrame) -> Result<PcGroups, CondError> {
        let n_valid = frame.n_valid();
        if n_valid < self.min_valid_points {
            return Err(CondError::TooFewPoints { n_valid, min: self.min_valid_points });
        }
        let centroid = valid_centroid(frame).expect("n_valid > 0");

        let positions: Vec<[f64; 3]> = (0..frame.n_max())
            .map(|slot| {
                [
                    f64::from(frame.points()[(slot, 0)]),
                    f64::from(frame.points()[(slot, 1)]),
                    f64::from(frame.points()[(slot, 2)]),
                ]
            })
            .collect();
        let valid = frame.valid_mask();

        let anchor_count = n_valid.div_ceil(self.fps_stride);
        let anchor_indices = fps(&positions, valid, anchor_count)?;
        let anchor_positions: Vec<[f64; 3]> =
            anchor_indices.iter().map(|&i| positions[i]).collect();
        let groups =
            ball_query(&positions, valid, &anchor_positions, self.ball_radius_m, self.ball_samples)?;

        let mut features = Array2::<f64>::zeros((anchor_count * self.ball_samples, POINT_FEATURES));
        let mut empty_groups = Vec::with_capacity(anchor_count);
        for (g, group) in groups.iter().enumerate() {
            empty_groups.push(group.empty);
            for (s, &member) in group.indices.iter().enumerate() {
                let row = g * self.ball_samples + s;
                for axis in 0..3 {
                    features[(row, axis)] = positions[member][axis] - centroid[axis];
                }
                for attr in 3..POINT_FEATURES {
                    features[(row, attr)] = f64::from(frame.points()[(member, attr)]);
                }
            }
        }
        Ok(PcGroups { anchor_count, features, anchor_positions, empty_groups, centroid })
    }

    /// Encode prepared frames to one token row per anchor, frames
    /// concatenated in order: `(Σ anchor_count, d_point)`.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        groups: &[PcGroups],
    ) -> Result<TensorId, CondError> {
        if groups.is_empty() {
            return Err(CondError::EmptyCloud);
        }
        let total_rows: usize = groups.iter().map(|g| g.features.nrows()).sum();
        let mut stacked = Array2::<f64>::zeros((total_rows, POINT_FEATURES));
        let mut row = 0;
        for group in groups {
            stacked
                .slice_mut(ndarray::s![row..row + group.features.nrows(), ..])
                .assign(&group.features);
            row += group.features.nrows();
        }
        let x = sess.tape.constant(stacked);
        let embedded = self.embed.forward(sess, x)?;
        Ok(sess.tape.max_pool_blocks(embedded, self.ball_samples))
    }
}
