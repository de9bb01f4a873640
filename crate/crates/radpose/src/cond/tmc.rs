//! Temporal motion consistency: a window of recent coarse poses,
//! graph-encoded per frame and collapsed along time, so the denoiser sees
//! how each joint has been moving.
//!
//! Histories are chronological (oldest first); the producer consumes the
//! most recent `window` frames and cold-starts by repeating the earliest
//! available pose on the left. Frames older than the window never affect
//! the output.

use super::{CondError, POSE_EMBED_DIM};
use crate::nn::graph::{ChebConvSpec, GraphSpec};
use crate::nn::params::{ParameterStore, TapeSession};
use crate::nn::tape::TensorId;
use crate::nn::temporal::TemporalConvSpec;
use crate::nn::NnError;
use crate::skeleton::{PoseSequence, JOINT_COUNT};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Shared graph encoder per history pose + temporal convolution stack.
#[derive(Debug, Clone)]
pub struct TmcSpec {
    pub channels: usize,
    pub window: usize,
    encoder: ChebConvSpec,
    conv: TemporalConvSpec,
}

impl TmcSpec {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        window: usize,
        dropout_p: f64,
    ) -> Result<Self, CondError> {
        if window == 0 {
            return Err(CondError::BadConfig("history window must be at least 1".into()));
        }
        let prefix = prefix.into();
        Ok(Self {
            channels,
            window,
            encoder: ChebConvSpec::new(format!("{prefix}.enc"), 3, channels),
            conv: TemporalConvSpec::new(format!("{prefix}.conv"), channels, dropout_p),
        })
    }

    pub fn from_config(cfg: &super::CondConfig) -> Result<Self, CondError> {
        cfg.validate()?;
        Self::new("tmc", POSE_EMBED_DIM, cfg.history_window, cfg.dropout)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.encoder.init(store, rng)?;
        self.conv.init(store, rng)
    }

    /// Extract each history's window (most recent `window` poses,
    /// left-padded by repeating the earliest pose) and stack the joint
    /// coordinates to `(batch·window·17, 3)`, frame-major per history.
    pub fn prepare(&self, histories: &[&PoseSequence]) -> Result<Array2<f64>, CondError> {
        if histories.is_empty() {
            return Err(CondError::EmptyHistory);
        }
        let mut stacked =
            Array2::<f64>::zeros((histories.len() * self.window * JOINT_COUNT, 3));
        for (b, history) in histories.iter().enumerate() {
            let frames = history.frames();
            for slot in 0..self.window {
                // Right-aligned window: slot w-1 is the newest frame.
                let idx = (frames.len() + slot).checked_sub(self.window).unwrap_or(0);
                let pose = &frames[idx.min(frames.len() - 1)];
                for (j, joint) in pose.joints().iter().enumerate() {
                    let row = (b * self.window + slot) * JOINT_COUNT + j;
                    for (axis, &v) in joint.iter().enumerate() {
                        stacked[(row, axis)] = v;
                    }
                }
            }
        }
        Ok(stacked)
    }

    /// Encode stacked windows to `(batch·17, channels)` motion rows.
    pub fn forward(
        &self,
        sess: &mut TapeSession,
        graph: &GraphSpec,
        stacked: Array2<f64>,
    ) -> Result<TensorId, CondError> {
        let rows = stacked.nrows();
        let per_history = self.window * JOINT_COUNT;
        if rows == 0 || rows % per_history != 0 {
            return Err(CondError::BadConfig(format!(
                "stacked history has {rows} rows, expected a multiple of {per_history}"
            )));
        }
        let x = sess.tape.constant(stacked);
        let encoded = self.encoder.forward(sess, graph, x)?;

        // Reorder each history block from frame-major to joint-major so
        // the temporal convolution sees one block of `window` steps per
        // joint.
        let mut map = Vec::with_capacity(per_history);
        for joint in 0..JOINT_COUNT {
            for step in 0..self.window {
                map.push(step * JOINT_COUNT + joint);
            }
        }
        let series = sess.tape.gather_rows_blocks(encoded, per_history, map);
        Ok(self.conv.forward(sess, series, self.window)?)
    }
}
