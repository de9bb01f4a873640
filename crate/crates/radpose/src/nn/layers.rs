//! Dense layer recipes: the five-step MLP and the residual transformer
//! layer, both operating on row-stacked token batches.
//!
//! A "batch" of B token groups with T tokens each is one `(B·T, dim)`
//! matrix; attention mixes tokens inside each block of T rows only. Key
//! masking is additive: a `(B·T, T)` matrix of zeros and large negative
//! values is added to the pre-softmax scores.

use super::params::{xavier_uniform, zeros, ParameterStore, TapeSession};
use super::tape::TensorId;
use super::NnError;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Epsilon inside every layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive score for masked attention keys.
pub const ATTENTION_MASK_VALUE: f64 = -1e30;
/// Init damping for the output projection of each residual branch
/// (attention `wo`, feed-forward `fc2.w`). The residual stream has no
/// normalization after the adds, so unit-gain branch inits compound the
/// stream's variance multiplicatively with depth; damping by roughly
/// `1/sqrt(2·layers)` for the deepest stack in the model keeps the
/// stream near unit scale at init.
pub const RESIDUAL_BRANCH_GAIN: f64 = 0.25;

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

/// LayerNorm → Linear → Dropout → ReLU → Linear.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout_p: f64,
}

impl MlpSpec {
    pub fn new(
        prefix: impl Into<String>,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        dropout_p: f64,
    ) -> Self {
        Self { prefix: prefix.into(), d_in, d_hidden, d_out, dropout_p }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        let p = &self.prefix;
        store.insert(&format!("{p}.ln.gain"), Array2::ones((1, self.d_in)))?;
        store.insert(&format!("{p}.ln.bias"), zeros(1, self.d_in))?;
        store.insert(&format!("{p}.fc1.w"), xavier_uniform(self.d_in, self.d_hidden, rng))?;
        store.insert(&format!("{p}.fc1.b"), zeros(1, self.d_hidden))?;
        store.insert(&format!("{p}.fc2.w"), xavier_uniform(self.d_hidden, self.d_out, rng))?;
        store.insert(&format!("{p}.fc2.b"), zeros(1, self.d_out))?;
        Ok(())
    }

    pub fn forward(&self, sess: &mut TapeSession, x: TensorId) -> Result<TensorId, NnError> {
        let got = sess.tape.value(x).ncols();
        if got != self.d_in {
            return Err(shape_err(
                "mlp_forward",
                format!("'{}' expects {} input features, got {got}", self.prefix, self.d_in),
            ));
        }
        let p = &self.prefix;
        let gain = sess.param(&format!("{p}.ln.gain"))?;
        let bias = sess.param(&format!("{p}.ln.bias"))?;
        let w1 = sess.param(&format!("{p}.fc1.w"))?;
        let b1 = sess.param(&format!("{p}.fc1.b"))?;
        let w2 = sess.param(&format!("{p}.fc2.w"))?;
        let b2 = sess.param(&format!("{p}.fc2.b"))?;

        let h = sess.tape.layer_norm_rows(x, gain, bias, LAYER_NORM_EPS);
        let h = sess.tape.matmul(h, w1);
        let h = sess.tape.add_row_broadcast(h, b1);
        let h = sess.dropout(h, self.dropout_p);
        let h = sess.tape.relu(h);
        let h = sess.tape.matmul(h, w2);
        Ok(sess.tape.add_row_broadcast(h, b2))
    }
}

/// Output of a transformer layer plus its per-head attention matrices.
pub struct AttentionProbe {
    pub output: TensorId,
    /// One `(B·T, T)` row-stochastic matrix per head.
    pub attention: Vec<Array2<f64>>,
}

/// Pre-LN-free residual transformer layer:
/// `x + MultiHeadSelfAttention(x)` followed by `h + Mlp(h)`.
#[derive(Debug, Clone)]
pub struct TransformerSpec {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout_p: f64,
}

impl TransformerSpec {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::HeadSplit { dim, heads });
        }
        Ok(Self { prefix: prefix.into(), dim, heads, ffn_hidden, dropout_p })
    }

    fn ffn(&self) -> MlpSpec {
        MlpSpec::new(
            format!("{}.ffn", self.prefix),
            self.dim,
            self.ffn_hidden,
            self.dim,
            self.dropout_p,
        )
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        let p = &self.prefix;
        for name in ["wq", "wk", "wv"] {
            store.insert(&format!("{p}.{name}"), xavier_uniform(self.dim, self.dim, rng))?;
        }
        let wo = xavier_uniform(self.dim, self.dim, rng).mapv(|v| v * RESIDUAL_BRANCH_GAIN);
        store.insert(&format!("{p}.wo"), wo)?;
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.{name}"), zeros(1, self.dim))?;
        }
        self.ffn().init(store, rng)?;
        let fc2 = format!("{p}.ffn.fc2.w");
        let damped = store.get(&fc2)?.mapv(|v| v * RESIDUAL_BRANCH_GAIN);
        store.set(&fc2, damped)
    }

    /// `x` is `(B·tokens, dim)`; `key_mask`, when given, is `(B·tokens,
    /// tokens)` and is added to the raw attention scores (use
    /// [`ATTENTION_MASK_VALUE`] to hide a key from a query).
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        x: TensorId,
        tokens: usize,
        key_mask: Option<&Array2<f64>>,
    ) -> Result<TensorId, NnError> {
        Ok(self.forward_probed(sess, x, tokens, key_mask)?.output)
    }

    pub fn forward_probed(
        &self,
        sess: &mut TapeSession,
        x: TensorId,
        tokens: usize,
        key_mask: Option<&Array2<f64>>,
    ) -> Result<AttentionProbe, NnError> {
        let (rows, cols) = (sess.tape.value(x).nrows(), sess.tape.value(x).ncols());
        if cols != self.dim {
            return Err(shape_err(
                "transformer_layer_forward",
                format!("'{}' expects width {}, got {cols}", self.prefix, self.dim),
            ));
        }
        if tokens == 0 || rows % tokens != 0 {
            return Err(shape_err(
                "transformer_layer_forward",
                format!("{rows} rows do not form blocks of {tokens} tokens"),
            ));
        }
        if let Some(mask) = key_mask {
            if mask.nrows() != rows || mask.ncols() != tokens {
                return Err(shape_err(
                    "transformer_layer_forward",
                    format!(
                        "key mask is {}x{}, expected {rows}x{tokens}",
                        mask.nrows(),
                        mask.ncols()
                    ),
                ));
            }
        }

        let p = &self.prefix;
        let wq = sess.param(&format!("{p}.wq"))?;
        let bq = sess.param(&format!("{p}.bq"))?;
        let wk = sess.param(&format!("{p}.wk"))?;
        let bk = sess.param(&format!("{p}.bk"))?;
        let wv = sess.param(&format!("{p}.wv"))?;
        let bv = sess.param(&format!("{p}.bv"))?;
        let wo = sess.param(&format!("{p}.wo"))?;
        let bo = sess.param(&format!("{p}.bo"))?;

        let q = sess.tape.matmul(x, wq);
        let q = sess.tape.add_row_broadcast(q, bq);
        let k = sess.tape.matmul(x, wk);
        let k = sess.tape.add_row_broadcast(k, bk);
        let v = sess.tape.matmul(x, wv);
        let v = sess.tape.add_row_broadcast(v, bv);

        let mask_id = key_mask.map(|m| sess.tape.constant(m.clone()));
        let d_head = self.dim / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = sess.tape.slice_cols(q, head * d_head, d_head);
            let kh = sess.tape.slice_cols(k, head * d_head, d_head);
            let vh = sess.tape.slice_cols(v, head * d_head, d_head);
            let scores = sess.tape.block_matmul_nt(qh, kh, tokens, tokens);
            let scores = sess.tape.scale(scores, scale);
            let scores = match mask_id {
                Some(m) => sess.tape.add(scores, m),
                None => scores,
            };
            let attn = sess.tape.softmax_rows(scores);
            attention.push(sess.tape.value(attn).clone());
            head_outputs.push(sess.tape.block_matmul_nn(attn, vh, tokens, tokens));
        }
        let ctx = sess.tape.concat_cols(&head_outputs);
        let proj = sess.tape.matmul(ctx, wo);
        let proj = sess.tape.add_row_broadcast(proj, bo);
        let h = sess.tape.add(x, proj);

        let ffn_out = self.ffn().forward(sess, h)?;
        let output = sess.tape.add(h, ffn_out);
        Ok(AttentionProbe { output, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{parameter_gradient_errors, FD_REL_TOL, FD_STEP};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_array(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mlp_zero_second_linear_yields_bias_broadcast() {
        let spec = MlpSpec::new("m", 3, 4, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        store.set("m.fc2.w", zeros(4, 2)).unwrap();
        store.set("m.fc2.b", array![[0.7, -0.3]]).unwrap();

        let mut sess = TapeSession::new(&store, false, 0);
        let x = sess.tape.constant(random_array(5, 3, &mut rng));
        let y = spec.forward(&mut sess, x).unwrap();
        for row in sess.tape.value(y).rows() {
            assert_abs_diff_eq!(row[0], 0.7, epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], -0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn mlp_full_dropout_leaves_only_the_bias_path() {
        let spec = MlpSpec::new("m", 3, 4, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        store.set("m.fc2.b", array![[1.5, 2.5]]).unwrap();

        let mut sess = TapeSession::new(&store, true, 0);
        let x = sess.tape.constant(random_array(4, 3, &mut rng));
        let y = spec.forward(&mut sess, x).unwrap();
        for row in sess.tape.value(y).rows() {
            assert_abs_diff_eq!(row[0], 1.5, epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn mlp_matches_hand_forward() {
        let spec = MlpSpec::new("m", 3, 2, 2, 0.0);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        spec.init(&mut store, &mut rng).unwrap();
        store.set("m.ln.gain", array![[2.0, 1.0, 0.5]]).unwrap();
        store.set("m.ln.bias", array![[0.1, -0.1, 0.0]]).unwrap();
        store.set("m.fc1.w", array![[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]).unwrap();
        store.set("m.fc1.b", array![[0.05, -0.05]]).unwrap();
        store.set("m.fc2.w", array![[0.5, -0.25], [1.0, 0.75]]).unwrap();
        store.set("m.fc2.b", array![[0.2, 0.3]]).unwrap();

        let x = array![[1.0, 2.0, 3.0], [-0.5, 0.25, 0.75]];
        let mut sess = TapeSession::new(&store, false, 0);
        let xi = sess.tape.constant(x.clone());
        let y = spec.forward(&mut sess, xi).unwrap();

        // Independent scalar-loop reimplementation of the recipe.
        let gain = [2.0, 1.0, 0.5];
        let lbias = [0.1, -0.1, 0.0];
        let w1 = [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]];
        let b1 = [0.05, -0.05];
        let w2 = [[0.5, -0.25], [1.0, 0.75]];
        let b2 = [0.2, 0.3];
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / 3.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let normed: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gain[c] + lbias[c])
                .collect();
            let mut hidden = [0.0f64; 2];
            for (h, hv) in hidden.iter_mut().enumerate() {
                *hv = b1[h] + (0..3).map(|c| normed[c] * w1[c][h]).sum::<f64>();
                *hv = hv.max(0.0);
            }
            for out in 0..2 {
                let expect = b2[out] + (0..2).map(|h| hidden[h] * w2[h][out]).sum::<f64>();
                assert_abs_diff_eq!(sess.tape.value(y)[(r, out)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mlp_rejects_wrong_width_and_meets_gradient_contract() {
        let spec = MlpSpec::new("m", 5, 6, 4, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();

        let mut sess = TapeSession::new(&store, false, 0);
        let bad = sess.tape.constant(random_array(2, 3, &mut rng));
        assert!(matches!(spec.forward(&mut sess, bad), Err(NnError::Shape { .. })));

        let x = random_array(3, 5, &mut rng);
        let errors = parameter_gradient_errors(
            &store,
            &mut |sess| {
                let xi = sess.tape.constant(x.clone());
                let y = spec.forward(sess, xi)?;
                Ok(sess.tape.mean_all(y))
            },
            FD_STEP,
        )
        .unwrap();
        assert_eq!(errors.len(), 6, "all six mlp parameters receive gradients");
        for (name, err) in errors {
            assert!(err <= FD_REL_TOL, "{name}: relative error {err}");
        }
    }

    fn transformer_fixture(
        heads: usize,
        dropout: f64,
        seed: u64,
    ) -> (TransformerSpec, ParameterStore) {
        let spec = TransformerSpec::new("t", 8, heads, 8, dropout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        (spec, store)
    }

    #[test]
    fn transformer_rejects_bad_head_split() {
        assert!(matches!(
            TransformerSpec::new("t", 7, 4, 8, 0.0),
            Err(NnError::HeadSplit { dim: 7, heads: 4 })
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (spec, store) = transformer_fixture(2, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut sess = TapeSession::new(&store, false, 0);
        // Three blocks of one token each.
        let x = sess.tape.constant(random_array(3, 8, &mut rng));
        let probe = spec.forward_probed(&mut sess, x, 1, None).unwrap();
        for attn in &probe.attention {
            assert_eq!(attn.raw_dim(), ndarray::Dim([3, 1]));
            for &w in attn {
                assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_produce_identical_rows() {
        let (spec, store) = transformer_fixture(4, 0.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let row = random_array(1, 8, &mut rng);
        let mut doubled = Array2::zeros((2, 8));
        doubled.row_mut(0).assign(&row.row(0));
        doubled.row_mut(1).assign(&row.row(0));

        let mut sess = TapeSession::new(&store, false, 0);
        let x = sess.tape.constant(doubled);
        let y = spec.forward(&mut sess, x, 2, None).unwrap();
        let out = sess.tape.value(y);
        for col in 0..8 {
            assert_abs_diff_eq!(out[(0, col)], out[(1, col)], epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_matches_brute_force_softmax_oracle() {
        let (spec, store) = transformer_fixture(1, 0.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_array(3, 8, &mut rng);
        let mut sess = TapeSession::new(&store, false, 0);
        let xi = sess.tape.constant(x.clone());
        let probe = spec.forward_probed(&mut sess, xi, 3, None).unwrap();

        // Independent computation with plain loops.
        let wq = store.get("t.wq").unwrap();
        let bq = store.get("t.bq").unwrap();
        let wk = store.get("t.wk").unwrap();
        let bk = store.get("t.bk").unwrap();
        let q = x.dot(wq) + bq;
        let k = x.dot(wk) + bk;
        let scale = 1.0 / 8f64.sqrt();
        for i in 0..3 {
            let mut scores = [0.0f64; 3];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = (0..8).map(|d| q[(i, d)] * k[(j, d)]).sum::<f64>() * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..3 {
                assert_abs_diff_eq!(
                    probe.attention[0][(i, j)],
                    exps[j] / total,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (spec, store) = transformer_fixture(4, 0.0, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sess = TapeSession::new(&store, false, 0);
        let x = sess.tape.constant(random_array(10, 8, &mut rng));
        let probe = spec.forward_probed(&mut sess, x, 5, None).unwrap();
        for attn in &probe.attention {
            for row in attn.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn key_mask_silences_masked_tokens() {
        let (spec, store) = transformer_fixture(2, 0.0, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_array(4, 8, &mut rng);
        // One block of four tokens; hide token 3 from every query.
        let mut mask = Array2::<f64>::zeros((4, 4));
        for row in 0..4 {
            mask[(row, 3)] = ATTENTION_MASK_VALUE;
        }
        let mut sess = TapeSession::new(&store, false, 0);
        let xi = sess.tape.constant(x.clone());
        let probe = spec.forward_probed(&mut sess, xi, 4, Some(&mask)).unwrap();
        for attn in &probe.attention {
            for row in 0..4 {
                assert!(attn[(row, 3)] < 1e-12);
                assert_abs_diff_eq!(attn.row(row).sum(), 1.0, epsilon = 1e-9);
            }
        }

        // Perturbing the masked token must not change the other outputs.
        let mut x2 = x.clone();
        for col in 0..8 {
            x2[(3, col)] += 5.0;
        }
        let mut sess2 = TapeSession::new(&store, false, 0);
        let xi2 = sess2.tape.constant(x2);
        let probe2 = spec.forward_probed(&mut sess2, xi2, 4, Some(&mask)).unwrap();
        for row in 0..3 {
            for col in 0..8 {
                assert_abs_diff_eq!(
                    sess.tape.value(probe.output)[(row, col)],
                    sess2.tape.value(probe2.output)[(row, col)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn transformer_meets_gradient_contract() {
        let (spec, store) = transformer_fixture(2, 0.2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_array(6, 8, &mut rng);
        let errors = parameter_gradient_errors(
            &store,
            &mut |sess| {
                let xi = sess.tape.constant(x.clone());
                let y = spec.forward(sess, xi, 3, None)?;
                Ok(sess.tape.mean_all(y))
            },
            FD_STEP,
        )
        .unwrap();
        assert_eq!(errors.len(), 14, "8 attention + 6 ffn parameters");
        for (name, err) in errors {
            assert!(err <= FD_REL_TOL, "{name}: relative error {err}");
        }
    }
}
