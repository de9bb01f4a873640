//! Structural limb-length consistency: decode explicit nonnegative bone
//! lengths from the joint features and broadcast their embedding to every
//! joint, so the denoiser sees the same skeletal-scale hint at each node.

use super::{CondError, POSE_EMBED_DIM};
use crate::nn::layers::MlpSpec;
use crate::nn::params::{xavier_uniform, zeros, ParameterStore, TapeSession};
use crate::nn::tape::TensorId;
use crate::nn::NnError;
use crate::skeleton::{JOINT_COUNT, LIMB_COUNT};
use rand_chacha::ChaCha8Rng;

/// Flattened joint features → 16 softplus lengths → broadcast embedding.
#[derive(Debug, Clone)]
pub struct SlcSpec {
    pub prefix: String,
    pub d_joint: usize,
    g1: MlpSpec,
}

impl SlcSpec {
    pub fn new(prefix: impl Into<String>, d_joint: usize, dropout_p: f64) -> Self {
        let prefix = prefix.into();
        let g1 = MlpSpec::new(
            format!("{prefix}.g1"),
            JOINT_COUNT * d_joint,
            d_joint,
            LIMB_COUNT,
            dropout_p,
        );
        Self { prefix, d_joint, g1 }
    }

    pub fn from_config(cfg: &super::CondConfig) -> Self {
        Self::new("slc", cfg.d_joint, cfg.dropout)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.g1.init(store, rng)?;
        let p = &self.prefix;
        store.insert(&format!("{p}.g2.w"), xavier_uniform(LIMB_COUNT, POSE_EMBED_DIM, rng))?;
        store.insert(&format!("{p}.g2.b"), zeros(1, POSE_EMBED_DIM))?;
        Ok(())
    }

    /// `(batch·17, d_joint)` joint features → per-frame lengths
    /// `(batch, 16)` and the broadcast condition `(batch·17, 96)`.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        f_j: TensorId,
    ) -> Result<(TensorId, TensorId), CondError> {
        let (rows, cols) = (sess.tape.value(f_j).nrows(), sess.tape.value(f_j).ncols());
        if cols != self.d_joint || rows == 0 || rows % JOINT_COUNT != 0 {
            return Err(CondError::BadConfig(format!(
                "joint features are {rows}x{cols}, expected (frames·{JOINT_COUNT})x{}",
                self.d_joint
            )));
        }
        let flattened = sess.tape.flatten_blocks(f_j, JOINT_COUNT);
        let raw = self.g1.forward(sess, flattened)?;
        let lengths = sess.tape.softplus(raw);

        let p = &self.prefix;
        let w = sess.param(&format!("{p}.g2.w"))?;
        let b = sess.param(&format!("{p}.g2.b"))?;
        let projected = sess.tape.matmul(lengths, w);
        let projected = sess.tape.add_row_broadcast(projected, b);
        let c_lim = sess.tape.repeat_rows_interleave(projected, JOINT_COUNT);
        Ok((lengths, c_lim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{parameter_gradient_errors, FD_REL_TOL, FD_STEP};
    use crate::nn::layers::LAYER_NORM_EPS;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn fixture(d_joint: usize, seed: u64) -> (SlcSpec, ParameterStore) {
        let spec = SlcSpec::new("slc", d_joint, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        (spec, store)
    }

    #[test]
    fn zero_features_decode_to_softplus_zero_lengths() {
        let (spec, store) = fixture(4, 1);
        let mut sess = TapeSession::new(&store, false, 0);
        let zero = sess.tape.constant(Array2::zeros((2 * JOINT_COUNT, 4)));
        let (lengths, _) = spec.forward(&mut sess, zero).unwrap();
        let l = sess.tape.value(lengths);
        assert_eq!(l.raw_dim(), ndarray::Dim([2, LIMB_COUNT]));
        for &v in l {
            assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn limb_condition_rows_are_identical_within_each_frame() {
        let (spec, store) = fixture(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((2 * JOINT_COUNT, 4), |_| rng.random_range(-1.0..1.0));
        let mut sess = TapeSession::new(&store, false, 0);
        let xi = sess.tape.constant(x);
        let (lengths, c_lim) = spec.forward(&mut sess, xi).unwrap();

        let c = sess.tape.value(c_lim);
        assert_eq!(c.nrows(), 2 * JOINT_COUNT);
        assert_eq!(c.ncols(), POSE_EMBED_DIM);
        for frame in 0..2 {
            for j in 1..JOINT_COUNT {
                for col in 0..POSE_EMBED_DIM {
                    assert_eq!(
                        c[(frame * JOINT_COUNT + j, col)],
                        c[(frame * JOINT_COUNT, col)],
                        "broadcast rows must be bit-identical"
                    );
                }
            }
        }
        // Distinct frames produce distinct rows (weights are generic).
        let differs = (0..POSE_EMBED_DIM)
            .any(|col| c[(0, col)] != c[(JOINT_COUNT, col)]);
        assert!(differs);
        // Lengths are nonnegative by construction.
        assert!(sess.tape.value(lengths).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn matches_composed_mlp_oracle() {
        let (spec, mut store) = fixture(1, 4);
        // d_joint=1 → g1 input width 17, hidden 1, output 16.
        store.set("slc.g1.ln.gain", Array2::ones((1, 17))).unwrap();
        store.set("slc.g1.ln.bias", Array2::zeros((1, 17))).unwrap();
        store.set("slc.g1.fc1.w", Array2::from_shape_fn((17, 1), |(i, _)| 0.1 * i as f64)).unwrap();
        store.set("slc.g1.fc1.b", Array2::from_elem((1, 1), 0.2)).unwrap();
        store
            .set("slc.g1.fc2.w", Array2::from_shape_fn((1, 16), |(_, j)| 0.05 * (j as f64 + 1.0)))
            .unwrap();
        store.set("slc.g1.fc2.b", Array2::from_elem((1, 16), -0.1)).unwrap();
        store
            .set(
                "slc.g2.w",
                Array2::from_shape_fn((16, POSE_EMBED_DIM), |(i, j)| {
                    ((i + 2 * j) % 5) as f64 * 0.1 - 0.2
                }),
            )
            .unwrap();
        store.set("slc.g2.b", Array2::from_elem((1, POSE_EMBED_DIM), 0.3)).unwrap();

        let features: Vec<f64> = (0..17).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Array2::from_shape_vec((17, 1), features.clone()).unwrap();
        let mut sess = TapeSession::new(&store, false, 0);
        let xi = sess.tape.constant(x);
        let (lengths, c_lim) = spec.forward(&mut sess, xi).unwrap();

        // Oracle with plain loops: flatten → layernorm → fc1 → relu → fc2
        // → softplus → linear → broadcast.
        let mean = features.iter().sum::<f64>() / 17.0;
        let var = features.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normed: Vec<f64> = features.iter().map(|v| (v - mean) * inv).collect();
        let hidden =
            (0.2 + normed.iter().enumerate().map(|(i, v)| v * 0.1 * i as f64).sum::<f64>()).max(0.0);
        let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
        let expect_lengths: Vec<f64> =
            (0..16).map(|j| softplus(hidden * 0.05 * (j as f64 + 1.0) - 0.1)).collect();
        for (j, &expect) in expect_lengths.iter().enumerate() {
            assert_abs_diff_eq!(sess.tape.value(lengths)[(0, j)], expect, epsilon = 1e-12);
        }
        let g2w = store.get("slc.g2.w").unwrap();
        for col in 0..POSE_EMBED_DIM {
            let expect =
                0.3 + (0..16).map(|i| expect_lengths[i] * g2w[(i, col)]).sum::<f64>();
            for j in 0..JOINT_COUNT {
                assert_abs_diff_eq!(sess.tape.value(c_lim)[(j, col)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_meets_gradient_contract() {
        let (spec, store) = fixture(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);

        let mut sess = TapeSession::new(&store, false, 0);
        let ragged = sess.tape.constant(Array2::zeros((JOINT_COUNT + 1, 3)));
        assert!(matches!(spec.forward(&mut sess, ragged), Err(CondError::BadConfig(_))));

        let x = Array2::from_shape_fn((JOINT_COUNT, 3), |_| rng.random_range(-1.0..1.0));
        let errors = parameter_gradient_errors(
            &store,
            &mut |sess| {
                let xi = sess.tape.constant(x.clone());
                let (lengths, c_lim) = spec.forward(sess, xi).map_err(|e| match e {
                    CondError::Nn(inner) => inner,
                    other => NnError::BadConfig(other.to_string()),
                })?;
                let a = sess.tape.mean_all(lengths);
                let b = sess.tape.mean_all(c_lim);
                Ok(sess.tape.add(a, b))
            },
            FD_STEP,
        )
        .unwrap();
        assert_eq!(errors.len(), 8, "six g1 + two g2 parameters");
        for (name, err) in errors {
            assert!(err <= FD_REL_TOL, "{name}: relative error {err}");
        }
    }
}
