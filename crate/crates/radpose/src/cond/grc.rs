//! Global radar context: point-cloud tokens attend alongside a trainable
//! per-joint feature template, yielding joint features that degrade
//! gracefully when body parts drop out of the cloud, plus the coarse pose
//! decoded from them.

use super::{CondError, GLO_DIM};
use crate::nn::layers::{MlpSpec, TransformerSpec, ATTENTION_MASK_VALUE};
use crate::nn::params::{xavier_uniform, zeros, ParameterStore, TapeSession};
use crate::nn::tape::TensorId;
use crate::nn::NnError;
use crate::skeleton::{Pose, PoseError, JOINT_COUNT};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Point-cloud tokens for a batch: one matrix of concatenated per-frame
/// token rows plus the per-frame anchor counts.
#[derive(Debug, Clone, Copy)]
pub struct TokenBatch<'a> {
    /// `(Σ counts, d_point)` token rows, frames in order.
    pub tokens: TensorId,
    /// Anchor count per frame.
    pub counts: &'a [usize],
}

/// Template + positional embedding + global transformer stack + the
/// dimension-reduction head producing the global condition rows.
#[derive(Debug, Clone)]
pub struct GrcSpec {
    pub prefix: String,
    pub d_joint: usize,
    pub d_point: usize,
    layers: Vec<TransformerSpec>,
    glo: MlpSpec,
}

impl GrcSpec {
    pub fn new(
        prefix: impl Into<String>,
        d_joint: usize,
        d_point: usize,
        depth: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout_p: f64,
    ) -> Result<Self, CondError> {
        let prefix = prefix.into();
        if depth == 0 {
            return Err(CondError::BadConfig("global transformer needs depth ≥ 1".into()));
        }
        let layers = (0..depth)
            .map(|i| {
                TransformerSpec::new(format!("{prefix}.layer{i}"), d_joint, heads, ffn_hidden, dropout_p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let glo = MlpSpec::new(format!("{prefix}.glo"), d_joint, d_joint, GLO_DIM, dropout_p);
        Ok(Self { prefix, d_joint, d_point, layers, glo })
    }

    pub fn from_config(cfg: &super::CondConfig) -> Result<Self, CondError> {
        cfg.validate()?;
        Self::new(
            "grc",
            cfg.d_joint,
            cfg.d_point,
            cfg.global_depth,
            cfg.global_heads,
            cfg.global_ffn_hidden,
            cfg.dropout,
        )
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        let p = &self.prefix;
        store.insert(&format!("{p}.template"), xavier_uniform(JOINT_COUNT, self.d_joint, rng))?;
        store.insert(&format!("{p}.posemb"), xavier_uniform(JOINT_COUNT, self.d_joint, rng))?;
        store.insert(&format!("{p}.pc_proj.w"), xavier_uniform(self.d_point, self.d_joint, rng))?;
        store.insert(&format!("{p}.pc_proj.b"), zeros(1, self.d_joint))?;
        for layer in &self.layers {
            layer.init(store, rng)?;
        }
        self.glo.init(store, rng)
    }

    /// Run the global stack for `batch` frames. `pc` carries the encoded
    /// point-cloud tokens; `None` degrades to template-only attention
    /// (frames too sparse to encode). Returns the joint features
    /// `(batch·17, d_joint)` and the global condition `(batch·17, 64)`.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        batch: usize,
        pc: Option<TokenBatch<'_>>,
    ) -> Result<(TensorId, TensorId), CondError> {
        self.forward_probed(sess, batch, pc).map(|probe| (probe.f_j, probe.c_glo))
    }

    /// [`Self::forward`] plus the post-softmax attention of every layer and
    /// head, for inspection tooling.
    pub fn forward_probed(
        &self,
        sess: &mut TapeSession,
        batch: usize,
        pc: Option<TokenBatch<'_>>,
    ) -> Result<GrcProbe, CondError> {
        if batch == 0 {
            return Err(CondError::BadConfig("batch must be non-empty".into()));
        }
        let p = &self.prefix;
        let template = sess.param(&format!("{p}.template"))?;
        let posemb = sess.param(&format!("{p}.posemb"))?;
        let template_tokens = sess.tape.add(template, posemb);

        let (stack_input, tokens_per_frame, key_mask) = match pc {
            None => {
                let tile: Vec<usize> = (0..batch).flat_map(|_| 0..JOINT_COUNT).collect();
                (sess.tape.gather_rows_blocks(template_tokens, JOINT_COUNT, tile), JOINT_COUNT, None)
            }
            Some(TokenBatch { tokens, counts }) => {
                if counts.len() != batch {
                    return Err(CondError::BadConfig(format!(
                        "token batch covers {} frames, expected {batch}",
                        counts.len()
                    )));
                }
                let total: usize = counts.iter().sum();
                if sess.tape.value(tokens).nrows() != total
                    || sess.tape.value(tokens).ncols() != self.d_point
                {
                    return Err(CondError::BadConfig(format!(
                        "token matrix is {}x{}, expected {total}x{}",
                        sess.tape.value(tokens).nrows(),
                        sess.tape.value(tokens).ncols(),
                        self.d_point
                    )));
                }
                let p_max = counts.iter().copied().max().unwrap_or(0);
                if p_max == 0 {
                    return Err(CondError::EmptyCloud);
                }
                let proj_w = sess.param(&format!("{p}.pc_proj.w"))?;
                let proj_b = sess.param(&format!("{p}.pc_proj.b"))?;
                let projected = sess.tape.matmul(tokens, proj_w);
                let projected = sess.tape.add_row_broadcast(projected, proj_b);

                // One source matrix: 17 template rows, all projected
                // tokens, and a zero row for padding slots.
                let zero_row = sess.tape.constant(Array2::zeros((1, self.d_joint)));
                let source = sess.tape.concat_rows(&[template_tokens, projected, zero_row]);
                let source_rows = JOINT_COUNT + total + 1;
                let zero_idx = JOINT_COUNT + total;

                let span = JOINT_COUNT + p_max;
                let mut map = Vec::with_capacity(batch * span);
                let mut offset = 0usize;
                for &count in counts {
                    map.extend(0..JOINT_COUNT);
                    map.extend(JOINT_COUNT + offset..JOINT_COUNT + offset + count);
                    map.extend(std::iter::repeat_n(zero_idx, p_max - count));
                    offset += count;
                }
                let gathered = sess.tape.gather_rows_blocks(source, source_rows, map);

                let mask = if counts.iter().any(|&c| c < p_max) {
                    let mut mask = Array2::<f64>::zeros((batch * span, span));
                    for (b, &count) in counts.iter().enumerate() {
                        for row in b * span..(b + 1) * span {
                            for col in JOINT_COUNT + count..span {
                                mask[(row, col)] = ATTENTION_MASK_VALUE;
                            }
                        }
                    }
                    Some(mask)
                } else {
                    None
                };
                (gathered, span, mask)
            }
        };

        let mut h = stack_input;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let probe = layer.forward_probed(sess, h, tokens_per_frame, key_mask.as_ref())?;
            h = probe.output;
            attention.push(probe.attention);
        }
        let f_j = if tokens_per_frame == JOINT_COUNT {
            h
        } else {
            sess.tape.gather_rows_blocks(h, tokens_per_frame, (0..JOINT_COUNT).collect())
        };
        let c_glo = self.glo.forward(sess, f_j)?;
        Ok(GrcProbe { f_j, c_glo, tokens_per_frame, attention })
    }
}

/// Outputs of the global stack together with its attention maps.
#[derive(Debug, Clone)]
pub struct GrcProbe {
    /// `(batch·17, d_joint)` joint features.
    pub f_j: TensorId,
    /// `(batch·17, 64)` global condition rows.
    pub c_glo: TensorId,
    /// Rows each frame contributes to the attention grid: 17 template rows
    /// plus the padded token span (17 exactly on the template-only path).
    pub tokens_per_frame: usize,
    /// `attention[layer][head]` is the `(batch·span, span)` post-softmax
    /// grid, `span = tokens_per_frame`.
    pub attention: Vec<Vec<Array2<f64>>>,
}

/// Shared per-joint MLP decoding joint features to pelvis-relative 3D
/// coordinates.
#[derive(Debug, Clone)]
pub struct CoarseDecoderSpec {
    mlp: MlpSpec,
}

impl CoarseDecoderSpec {
    pub fn new(prefix: impl Into<String>, d_joint: usize, dropout_p: f64) -> Self {
        let prefix = prefix.into();
        Self { mlp: MlpSpec::new(format!("{prefix}.dec"), d_joint, d_joint, 3, dropout_p) }
    }

    pub fn from_config(cfg: &super::CondConfig) -> Self {
        Self::new("coarse", cfg.d_joint, cfg.dropout)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.mlp.init(store, rng)
    }

    /// `(batch·17, d_joint)` joint features → `(batch·17, 3)` coordinates.
    pub fn forward(&self, sess: &mut TapeSession, f_j: TensorId) -> Result<TensorId, NnError> {
        self.mlp.forward(sess, f_j)
    }

    /// Split decoded rows into one pose per frame.
    pub fn poses_from_rows(rows: &Array2<f64>) -> Result<Vec<Pose>, PoseError> {
        assert!(
            rows.ncols() == 3 && rows.nrows() % JOINT_COUNT == 0,
            "decoded rows must be (frames·17, 3)"
        );
        (0..rows.nrows() / JOINT_COUNT)
            .map(|b| {
                let mut joints = [[0.0f64; 3]; JOINT_COUNT];
                for (j, joint) in joints.iter_mut().enumerate() {
                    for (axis, value) in joint.iter_mut().enumerate() {
                        *value = rows[(b * JOINT_COUNT + j, axis)];
                    }
                }
                Pose::new(joints)
            })
            .collect()
    }
}
