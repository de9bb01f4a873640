//! Local radar context: per-joint neighborhoods around dynamic joint
//! anchors, attended point-to-point and weighted by how many neighbors
//! actually support the anchor.
//!
//! Anchors are absolute (sensor-frame) joint positions; the caller
//! de-normalizes diffusion poses before calling [`LrcSpec::prepare`]
//! (ground-truth pelvis translation during training, the frame's
//! valid-point centroid at inference).

use super::{CondError, LOC_DIM};
use crate::dataset::PaddedFrame;
use crate::nn::layers::{MlpSpec, TransformerSpec};
use crate::nn::params::{ParameterStore, TapeSession};
use crate::nn::pointset::knn;
use crate::nn::tape::TensorId;
use crate::nn::NnError;
use crate::skeleton::{Pose, JOINT_COUNT};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Features per neighbor: anchor-relative xyz plus radial velocity,
/// energy, and amplitude.
pub const NEIGHBOR_FEATURES: usize = 6;

/// One frame's featurized joint neighborhoods.
#[derive(Debug, Clone)]
pub struct LocalNeighborhoods {
    /// `(17·neighbor_count, 6)`, joint-major.
    pub features: Array2<f64>,
    /// Per joint, the fraction of selected neighbors within the
    /// reliability radius (repeats from short clouds counted as selected).
    pub reliability: [f64; JOINT_COUNT],
}

/// KNN selection → shared MLP → local transformer → mean pool →
/// reliability scaling.
#[derive(Debug, Clone)]
pub struct LrcSpec {
    pub width: usize,
    pub neighbor_count: usize,
    pub reliability_radius_m: f64,
    embed: MlpSpec,
    layers: Vec<TransformerSpec>,
}

impl LrcSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: impl Into<String>,
        width: usize,
        depth: usize,
        heads: usize,
        ffn_hidden: usize,
        neighbor_count: usize,
        reliability_radius_m: f64,
        dropout_p: f64,
    ) -> Result<Self, CondError> {
        let prefix = prefix.into();
        if depth == 0 || neighbor_count == 0 {
            return Err(CondError::BadConfig(
                "local transformer needs depth ≥ 1 and at least one neighbor".into(),
            ));
        }
        let embed = MlpSpec::new(format!("{prefix}.embed"), NEIGHBOR_FEATURES, width, width, dropout_p);
        let layers = (0..depth)
            .map(|i| {
                TransformerSpec::new(format!("{prefix}.layer{i}"), width, heads, ffn_hidden, dropout_p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { width, neighbor_count, reliability_radius_m, embed, layers })
    }

    pub fn from_config(cfg: &super::CondConfig) -> Result<Self, CondError> {
        cfg.validate()?;
        if cfg.local_width != LOC_DIM {
            return Err(CondError::BadConfig(format!(
                "local context rows are {LOC_DIM}-wide by contract, config says {}",
                cfg.local_width
            )));
        }
        Self::new(
            "lrc",
            cfg.local_width,
            cfg.local_depth,
            cfg.local_heads,
            cfg.local_ffn_hidden,
            cfg.neighbor_count,
            cfg.reliability_radius_m,
            cfg.dropout,
        )
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.embed.init(store, rng)?;
        for layer in &self.layers {
            layer.init(store, rng)?;
        }
        Ok(())
    }

    /// Select and featurize each joint's neighborhood. Fails on a frame
    /// with no valid points.
    pub fn prepare(&self, frame: &PaddedFrame, anchors: &Pose) -> Result<LocalNeighborhoods, CondError> {
        if frame.n_valid() == 0 {
            return Err(CondError::EmptyCloud);
        }
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
        let r_sq = self.reliability_radius_m * self.reliability_radius_m;

        let mut features = Array2::<f64>::zeros((JOINT_COUNT * self.neighbor_count, NEIGHBOR_FEATURES));
        let mut reliability = [0.0f64; JOINT_COUNT];
        for (joint, &anchor) in anchors.joints().iter().enumerate() {
            let neighbors = knn(&positions, valid, anchor, self.neighbor_count)?;
            let mut supported = 0usize;
            for (slot, &member) in neighbors.iter().enumerate() {
                let row = joint * self.neighbor_count + slot;
                let mut dist_sq = 0.0;
                for axis in 0..3 {
                    let rel = positions[member][axis] - anchor[axis];
                    features[(row, axis)] = rel;
                    dist_sq += rel * rel;
                }
                for attr in 3..NEIGHBOR_FEATURES {
                    features[(row, attr)] = f64::from(frame.points()[(member, attr)]);
                }
                if dist_sq <= r_sq {
                    supported += 1;
                }
            }
            reliability[joint] = supported as f64 / self.neighbor_count as f64;
        }
        Ok(LocalNeighborhoods { features, reliability })
    }

    /// Encode prepared neighborhoods to `(batch·17, width)` local
    /// condition rows; rows with zero reliability are exactly zero.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        neighborhoods: &[LocalNeighborhoods],
    ) -> Result<TensorId, CondError> {
        if neighborhoods.is_empty() {
            return Err(CondError::EmptyCloud);
        }
        let rows_per_frame = JOINT_COUNT * self.neighbor_count;
        let mut stacked = Array2::<f64>::zeros((neighborhoods.len() * rows_per_frame, NEIGHBOR_FEATURES));
        let mut scale = Array2::<f64>::zeros((neighborhoods.len() * JOINT_COUNT, 1));
        for (b, n) in neighborhoods.iter().enumerate() {
            stacked
                .slice_mut(ndarray::s![b * rows_per_frame..(b + 1) * rows_per_frame, ..])
                .assign(&n.features);
            for (joint, &r) in n.reliability.iter().enumerate() {
                scale[(b * JOINT_COUNT + joint, 0)] = r;
            }
        }

        let x = sess.tape.constant(stacked);
        let mut h = self.embed.forward(sess, x)?;
        for layer in &self.layers {
            h = layer.forward(sess, h, self.neighbor_count, None)?;
        }
        let pooled = sess.tape.mean_pool_blocks(h, self.neighbor_count);
        let weights = sess.tape.constant(scale);
        Ok(sess.tape.mul_row_broadcast(pooled, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{parameter_gradient_errors, FD_REL_TOL, FD_STEP};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn frame_from_rows(rows: &[[f32; 6]], padding: usize) -> PaddedFrame {
        let mut points = Array2::<f32>::zeros((rows.len() + padding, 6));
        let mut mask = vec![false; rows.len() + padding];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                points[(i, j)] = v;
            }
            mask[i] = true;
        }
        PaddedFrame::new(points, mask).unwrap()
    }

    fn toy_lrc(radius: f64, seed: u64) -> (LrcSpec, ParameterStore) {
        let spec = LrcSpec::new("lrc", 8, 1, 2, 8, 4, radius, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        (spec, store)
    }

    fn cluster_pose(center: [f64; 3]) -> Pose {
        // All 17 anchors at one spot, so every joint shares a neighborhood.
        Pose::new([center; JOINT_COUNT]).unwrap()
    }

    fn spread_cloud(n: usize, center: [f32; 3], radius: f32, seed: u64) -> Vec<[f32; 6]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    center[0] + rng.random_range(-radius..radius),
                    center[1] + rng.random_range(-radius..radius),
                    center[2] + rng.random_range(-radius..radius),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.1..2.0),
                    rng.random_range(0.1..2.0),
                ]
            })
            .collect()
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let (spec, _) = toy_lrc(0.04, 1);
        let frame = PaddedFrame::new(Array2::zeros((8, 6)), vec![false; 8]).unwrap();
        assert!(matches!(
            spec.prepare(&frame, &cluster_pose([0.0, 1.0, 0.0])),
            Err(CondError::EmptyCloud)
        ));
    }

    #[test]
    fn unsupported_anchors_produce_exactly_zero_rows() {
        let (spec, store) = toy_lrc(0.04, 2);
        // Points are 1 m away from every anchor: reliability 0.
        let cloud = spread_cloud(10, [0.0, 2.0, 0.0], 0.01, 3);
        let frame = frame_from_rows(&cloud, 5);
        let prepared = spec.prepare(&frame, &cluster_pose([0.0, 1.0, 0.0])).unwrap();
        assert!(prepared.reliability.iter().all(|&r| r == 0.0));

        let mut sess = TapeSession::new(&store, false, 0);
        let c_loc = spec.forward(&mut sess, &[prepared]).unwrap();
        for &v in sess.tape.value(c_loc) {
            assert_eq!(v, 0.0, "zero reliability must kill the row exactly");
        }
    }

    #[test]
    fn reliability_scales_features_linearly_under_threshold_changes() {
        // Same cloud, same anchors; only the reliability radius differs, so
        // the neighborhoods (and pooled features) are identical and the
        // output scales by the reliability ratio.
        let (wide, store) = toy_lrc(10.0, 4); // everything within radius → r = 1
        let (narrow, _) = toy_lrc(0.12, 4); // same init seed → same params

        // Four neighbors per joint: two at distance 0.1, two at 0.2.
        let cloud: Vec<[f32; 6]> = vec![
            [0.1, 1.0, 0.0, 0.5, 1.0, 1.0],
            [-0.1, 1.0, 0.0, -0.5, 1.5, 1.2],
            [0.0, 1.2, 0.0, 0.2, 0.8, 0.9],
            [0.0, 0.8, 0.0, -0.2, 1.1, 1.05],
        ];
        let frame = frame_from_rows(&cloud, 4);
        let anchors = cluster_pose([0.0, 1.0, 0.0]);

        let full = wide.prepare(&frame, &anchors).unwrap();
        let half = narrow.prepare(&frame, &anchors).unwrap();
        assert!(full.reliability.iter().all(|&r| r == 1.0));
        assert!(half.reliability.iter().all(|&r| r == 0.5));
        assert_eq!(full.features, half.features, "thresholds must not change features");

        let mut sess = TapeSession::new(&store, false, 0);
        let c_full = wide.forward(&mut sess, &[full]).unwrap();
        let c_half = narrow.forward(&mut sess, &[half]).unwrap();
        let a = sess.tape.value(c_full).clone();
        let b = sess.tape.value(c_half);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*y, 0.5 * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn short_clouds_cycle_and_count_repeats_in_reliability() {
        let (spec, _) = toy_lrc(0.5, 5);
        // Two valid points for four requested neighbors → both repeat.
        let cloud: Vec<[f32; 6]> =
            vec![[0.1, 1.0, 0.0, 0.0, 1.0, 1.0], [0.0, 1.3, 0.0, 0.0, 1.0, 1.0]];
        let frame = frame_from_rows(&cloud, 2);
        let prepared = spec.prepare(&frame, &cluster_pose([0.0, 1.0, 0.0])).unwrap();
        // Nearest (0.1 away) twice, second (0.3 away) twice; radius 0.5
        // covers all → reliability 1; rows repeat pairwise.
        assert!(prepared.reliability.iter().all(|&r| r == 1.0));
        for joint in 0..JOINT_COUNT {
            let base = joint * 4;
            for c in 0..NEIGHBOR_FEATURES {
                assert_eq!(prepared.features[(base, c)], prepared.features[(base + 2, c)]);
                assert_eq!(prepared.features[(base + 1, c)], prepared.features[(base + 3, c)]);
            }
        }
    }

    #[test]
    fn meets_gradient_contract() {
        let (spec, store) = toy_lrc(0.3, 6);
        let cloud = spread_cloud(7, [0.0, 1.0, 0.0], 0.25, 7);
        let frame = frame_from_rows(&cloud, 3);
        let prepared = spec.prepare(&frame, &cluster_pose([0.0, 1.0, 0.0])).unwrap();
        assert!(prepared.reliability.iter().any(|&r| r > 0.0));

        let errors = parameter_gradient_errors(
            &store,
            &mut |sess| {
                let c_loc = spec.forward(sess, std::slice::from_ref(&prepared)).map_err(|e| {
                    match e {
                        CondError::Nn(inner) => inner,
                        other => NnError::BadConfig(other.to_string()),
                    }
                })?;
                Ok(sess.tape.mean_all(c_loc))
            },
            FD_STEP,
        )
        .unwrap();
        // Embed MLP (6) + one transformer layer (14).
        assert_eq!(errors.len(), 20);
        for (name, err) in errors {
            assert!(err <= FD_REL_TOL, "{name}: relative error {err}");
        }
    }
}
