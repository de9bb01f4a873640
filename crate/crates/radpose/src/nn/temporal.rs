//! Temporal summarizer for short per-joint feature histories.
//!
//! Input rows hold one time step of one (sample, joint) series: a batch of
//! B skeletons with J joints observed over `window` steps is a
//! `(B·J·window, C)` matrix whose blocks of `window` consecutive rows are
//! one series in chronological order. The stack collapses each series to a
//! single row: two valid depthwise convolutions (kernel width 3, one
//! kernel column per feature channel, shared across joints) with dropout
//! and ReLU between them, then a max-pool over whatever time steps remain.
//!
//! Windows shorter than [`MIN_CONV_WINDOW`] are left-padded by repeating
//! the earliest frame, so a cold start with a single observed pose still
//! produces output (the pool then sees exactly one step).

use super::params::{zeros, ParameterStore, TapeSession};
use super::tape::TensorId;
use super::NnError;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Convolution kernel width.
pub const CONV_KERNEL_WIDTH: usize = 3;
/// Shortest window the two valid convolutions can consume directly.
pub const MIN_CONV_WINDOW: usize = 2 * (CONV_KERNEL_WIDTH - 1) + 1;

/// Conv1D → Dropout → ReLU → Conv1D → MaxPool over time.
#[derive(Debug, Clone)]
pub struct TemporalConvSpec {
    pub prefix: String,
    pub channels: usize,
    pub dropout_p: f64,
}

impl TemporalConvSpec {
    pub fn new(prefix: impl Into<String>, channels: usize, dropout_p: f64) -> Self {
        Self { prefix: prefix.into(), channels, dropout_p }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        let p = &self.prefix;
        // Per-channel kernels: modest fan-in of CONV_KERNEL_WIDTH.
        let bound = (6.0 / (CONV_KERNEL_WIDTH as f64 + 1.0)).sqrt();
        for name in ["conv1", "conv2"] {
            let kernel = Array2::from_shape_fn((CONV_KERNEL_WIDTH, self.channels), |_| {
                rng.random_range(-bound..bound)
            });
            store.insert(&format!("{p}.{name}.k"), kernel)?;
            store.insert(&format!("{p}.{name}.b"), zeros(1, self.channels))?;
        }
        Ok(())
    }

    /// Collapse each `window`-row block of `x` to one output row.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        x: TensorId,
        window: usize,
    ) -> Result<TensorId, NnError> {
        let (rows, cols) = (sess.tape.value(x).nrows(), sess.tape.value(x).ncols());
        if cols != self.channels {
            return Err(NnError::Shape {
                op: "temporal_conv_forward",
                detail: format!("'{}' expects {} channels, got {cols}", self.prefix, self.channels),
            });
        }
        if window == 0 || rows == 0 || rows % window != 0 {
            return Err(NnError::Shape {
                op: "temporal_conv_forward",
                detail: format!("{rows} rows do not form series of {window} steps"),
            });
        }

        // Left-replicate the earliest step until two valid width-3
        // convolutions fit.
        let (h, len) = if window < MIN_CONV_WINDOW {
            let mut map = vec![0usize; MIN_CONV_WINDOW - window];
            map.extend(0..window);
            (sess.tape.gather_rows_blocks(x, window, map), MIN_CONV_WINDOW)
        } else {
            (x, window)
        };

        let p = &self.prefix;
        let k1 = sess.param(&format!("{p}.conv1.k"))?;
        let b1 = sess.param(&format!("{p}.conv1.b"))?;
        let k2 = sess.param(&format!("{p}.conv2.k"))?;
        let b2 = sess.param(&format!("{p}.conv2.b"))?;

        let h = sess.tape.conv1d_depthwise(h, k1, b1, len);
        let h = sess.dropout(h, self.dropout_p);
        let h = sess.tape.relu(h);
        let len = len - (CONV_KERNEL_WIDTH - 1);
        let h = sess.tape.conv1d_depthwise(h, k2, b2, len);
        let len = len - (CONV_KERNEL_WIDTH - 1);
        Ok(sess.tape.max_pool_blocks(h, len))
    }
}
