//! The conditioned graph-convolutional noise predictor.
//!
//! A noisy pose batch `(B·17, 3)` is lifted to per-joint features, tagged
//! with a sinusoidal embedding of its diffusion step, and refined by a
//! fixed stack of residual skeleton blocks; the conditioning rows are
//! added to the running features before every block so each stage can
//! re-consult the measurement context. A final graph convolution reads
//! the noise estimate back out as `(B·17, 3)`.

use super::DiffusionError;
use crate::cond::{ConditionSet, GLO_DIM, LOC_DIM, POSE_EMBED_DIM};
use crate::nn::graph::{ChebConvSpec, GcnBlockSpec, GraphSpec};
use crate::nn::layers::MlpSpec;
use crate::nn::params::{xavier_uniform, zeros, ParameterStore, TapeSession};
use crate::nn::tape::TensorId;
use crate::nn::NnError;
use crate::skeleton::JOINT_COUNT;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Residual skeleton blocks in the denoiser.
pub const DENOISER_BLOCKS: usize = 5;

/// Anything that can estimate the injected noise for a noisy pose batch.
/// The production implementation is [`DenoiserSpec`]; tests substitute
/// oracles that return a known noise matrix.
pub trait NoisePredictor {
    fn predict(
        &self,
        sess: &mut TapeSession,
        hk_rows: &Array2<f64>,
        steps: &[usize],
        conds: &ConditionSet,
    ) -> Result<TensorId, DiffusionError>;
}

/// Classic interleaved sine/cosine embedding of the step index, one row
/// per batch item: column 2i holds `sin(k·10000^{−i/half})`, column 2i+1
/// the matching cosine. `dim` must be even.
pub fn sinusoidal_step_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "step embedding width must be even, got {dim}");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((steps.len(), dim));
    for (row, &k) in steps.iter().enumerate() {
        for i in 0..half {
            let angle = k as f64 * 10_000f64.powf(-(i as f64) / half as f64);
            out[(row, 2 * i)] = angle.sin();
            out[(row, 2 * i + 1)] = angle.cos();
        }
    }
    out
}

/// Parameter layout and wiring of the noise predictor.
#[derive(Debug, Clone)]
pub struct DenoiserSpec {
    pub channels: usize,
    pub glo_dim: usize,
    pub loc_dim: usize,
    prefix: String,
    graph: GraphSpec,
    encoder: ChebConvSpec,
    decoder: ChebConvSpec,
    step_embed: MlpSpec,
    global_proj: ChebConvSpec,
    blocks: Vec<GcnBlockSpec>,
}

impl DenoiserSpec {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        glo_dim: usize,
        loc_dim: usize,
        heads: usize,
        dropout_p: f64,
    ) -> Result<Self, DiffusionError> {
        if channels < 2 || channels % 2 != 0 {
            return Err(DiffusionError::BadConfig(format!(
                "denoiser width must be even for the step embedding, got {channels}"
            )));
        }
        let prefix = prefix.into();
        let blocks = (0..DENOISER_BLOCKS)
            .map(|i| {
                GcnBlockSpec::new(
                    format!("{prefix}.block{i}"),
                    JOINT_COUNT,
                    channels,
                    heads,
                    channels,
                    dropout_p,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            channels,
            glo_dim,
            loc_dim,
            graph: GraphSpec::human17(),
            encoder: ChebConvSpec::new(format!("{prefix}.enc"), 3, channels),
            decoder: ChebConvSpec::new(format!("{prefix}.dec"), channels, 3),
            step_embed: MlpSpec::new(format!("{prefix}.step"), channels, channels, channels, dropout_p),
            global_proj: ChebConvSpec::new(format!("{prefix}.proj_glo"), glo_dim, channels),
            blocks,
            prefix,
        })
    }

    /// Full-size predictor: 96-dim joint features, 4 attention heads, and
    /// projections matching the condition producers.
    pub fn standard(dropout_p: f64) -> Self {
        Self::new("denoiser", POSE_EMBED_DIM, GLO_DIM, LOC_DIM, 4, dropout_p)
            .expect("standard widths are valid")
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.encoder.init(store, rng)?;
        self.step_embed.init(store, rng)?;
        self.global_proj.init(store, rng)?;
        let p = &self.prefix;
        store.insert(&format!("{p}.proj_loc.w"), xavier_uniform(self.loc_dim, self.channels, rng))?;
        store.insert(&format!("{p}.proj_loc.b"), zeros(1, self.channels))?;
        for block in &self.blocks {
            block.init(store, rng)?;
        }
        self.decoder.init(store, rng)
    }

    fn expect_rows(
        &self,
        sess: &TapeSession,
        t: TensorId,
        rows: usize,
        cols: usize,
        what: &str,
    ) -> Result<(), DiffusionError> {
        let v = sess.tape.value(t);
        if v.nrows() != rows || v.ncols() != cols {
            return Err(DiffusionError::Shape {
                op: "denoiser_forward",
                detail: format!(
                    "{what} condition is {:?}, expected [{rows}, {cols}]",
                    v.shape()
                ),
            });
        }
        Ok(())
    }

    /// Estimate the injected noise for each pose in the batch. `steps`
    /// holds one diffusion step per batch item; an absent condition
    /// member contributes nothing.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        hk_rows: &Array2<f64>,
        steps: &[usize],
        conds: &ConditionSet,
    ) -> Result<TensorId, DiffusionError> {
        let rows = hk_rows.nrows();
        if hk_rows.ncols() != 3 || rows != steps.len() * JOINT_COUNT {
            return Err(DiffusionError::Shape {
                op: "denoiser_forward",
                detail: format!(
                    "noisy batch is {:?} for {} step indices",
                    hk_rows.shape(),
                    steps.len()
                ),
            });
        }

        let x = sess.tape.constant(hk_rows.clone());
        let mut z = self.encoder.forward(sess, &self.graph, x)?;

        let embedding = sinusoidal_step_embedding(steps, self.channels);
        let emb = sess.tape.constant(embedding);
        let emb = self.step_embed.forward(sess, emb)?;
        let emb_rows = sess.tape.repeat_rows_interleave(emb, JOINT_COUNT);
        z = sess.tape.add(z, emb_rows);

        let mut terms: Vec<TensorId> = Vec::new();
        if let Some(g) = conds.c_glo {
            self.expect_rows(sess, g, rows, self.glo_dim, "global")?;
            terms.push(self.global_proj.forward(sess, &self.graph, g)?);
        }
        if let Some(l) = conds.c_loc {
            self.expect_rows(sess, l, rows, self.loc_dim, "local")?;
            let w = sess.param(&format!("{}.proj_loc.w", self.prefix))?;
            let b = sess.param(&format!("{}.proj_loc.b", self.prefix))?;
            let projected = sess.tape.matmul(l, w);
            terms.push(sess.tape.add_row_broadcast(projected, b));
        }
        if let Some(t) = conds.c_lim {
            self.expect_rows(sess, t, rows, self.channels, "limb")?;
            terms.push(t);
        }
        if let Some(t) = conds.c_tem {
            self.expect_rows(sess, t, rows, self.channels, "motion")?;
            terms.push(t);
        }
        let context = terms.into_iter().reduce(|acc, t| sess.tape.add(acc, t));

        for block in &self.blocks {
            let staged = match context {
                Some(c) => sess.tape.add(z, c),
                None => z,
            };
            z = block.forward(sess, &self.graph, staged)?;
        }
        Ok(self.decoder.forward(sess, &self.graph, z)?)
    }
}

impl NoisePredictor for DenoiserSpec {
    fn predict(
        &self,
        sess: &mut TapeSession,
        hk_rows: &Array2<f64>,
        steps: &[usize],
        conds: &ConditionSet,
    ) -> Result<TensorId, DiffusionError> {
        self.forward(sess, hk_rows, steps, conds)
    }
}
