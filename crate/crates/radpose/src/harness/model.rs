//! The full two-stage model: one bundle owning every sub-network spec,
//! phase-grouped parameter initialization, checkpoint compatibility checks,
//! and the coarse forward pass shared by training and inference.

use super::HarnessError;
use crate::cond::{
    valid_centroid, CoarseDecoderSpec, CondConfig, GrcSpec, LrcSpec, PcEncoderSpec, SlcSpec,
    TmcSpec, TokenBatch,
};
use crate::dataset::PaddedFrame;
use crate::diffusion::DenoiserSpec;
use crate::nn::graph::GraphSpec;
use crate::nn::params::{ParameterStore, TapeSession};
use crate::nn::tape::TensorId;
use rand_chacha::ChaCha8Rng;

/// Parameter-name prefixes owned by the coarse stage (first training phase).
pub const PHASE1_PREFIXES: &[&str] = &["pc.", "grc.", "coarse."];
/// Prefixes owned by the refinement stack (second training phase).
pub const PHASE2_PREFIXES: &[&str] = &["denoiser.", "lrc.", "slc.", "tmc."];

/// Output of the coarse stage over a batch of point frames.
#[derive(Debug, Clone)]
pub struct CoarseForward {
    /// `(B·17, d_joint)` joint features.
    pub f_j: TensorId,
    /// `(B·17, 64)` global condition rows.
    pub c_glo: TensorId,
    /// `(B·17, 3)` decoded pelvis-relative coarse coordinates.
    pub coarse_rows: TensorId,
    /// Per-frame valid-point centroid (sensor frame); `None` when a frame
    /// has no valid points.
    pub centroids: Vec<Option<[f64; 3]>>,
}

/// Every sub-network spec, built from one conditioning config.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub pc: PcEncoderSpec,
    pub grc: GrcSpec,
    pub coarse: CoarseDecoderSpec,
    pub lrc: LrcSpec,
    pub slc: SlcSpec,
    pub tmc: TmcSpec,
    pub denoiser: DenoiserSpec,
    pub graph: GraphSpec,
}

impl PoseModel {
    pub fn from_config(cfg: &CondConfig) -> Result<Self, HarnessError> {
        Ok(Self {
            pc: PcEncoderSpec::from_config(cfg)?,
            grc: GrcSpec::from_config(cfg)?,
            coarse: CoarseDecoderSpec::from_config(cfg),
            lrc: LrcSpec::from_config(cfg)?,
            slc: SlcSpec::from_config(cfg),
            tmc: TmcSpec::from_config(cfg)?,
            denoiser: DenoiserSpec::standard(cfg.dropout),
            graph: GraphSpec::human17(),
        })
    }

    /// Initializes the coarse-stage parameters (point encoder, global
    /// context, pose decoder).
    pub fn init_phase1(
        &self,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), HarnessError> {
        self.pc.init(store, rng)?;
        self.grc.init(store, rng)?;
        self.coarse.init(store, rng)?;
        Ok(())
    }

    /// Initializes the refinement-stack parameters (denoiser, local /
    /// structural / temporal condition producers).
    pub fn init_phase2(
        &self,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), HarnessError> {
        self.denoiser.init(store, rng)?;
        self.lrc.init(store, rng)?;
        self.slc.init(store, rng)?;
        self.tmc.init(store, rng)?;
        Ok(())
    }

    /// Checks that `store` holds a coarse stage compatible with this model:
    /// every phase-one prefix is populated and the template width matches.
    pub fn check_phase1_compatible(&self, store: &ParameterStore) -> Result<(), HarnessError> {
        for prefix in PHASE1_PREFIXES {
            if !store.names().any(|n| n.starts_with(prefix)) {
                return Err(HarnessError::Config(format!(
                    "checkpoint has no '{prefix}*' parameters; not a coarse-stage checkpoint"
                )));
            }
        }
        let template = store.get("grc.template").map_err(|_| {
            HarnessError::Config("checkpoint is missing the joint template 'grc.template'".into())
        })?;
        if template.ncols() != self.grc.d_joint {
            return Err(HarnessError::Config(format!(
                "checkpoint joint width {} does not match the configured {}",
                template.ncols(),
                self.grc.d_joint
            )));
        }
        Ok(())
    }

    /// True when the frame has enough valid points for the point encoder.
    pub fn frame_encodable(&self, frame: &PaddedFrame) -> bool {
        frame.n_valid() >= self.pc.min_valid_points
    }

    /// Coarse stage over a batch of frames. Frames too sparse for the point
    /// encoder contribute no point tokens and attend over the joint
    /// template alone, so every frame always yields a pose.
    pub fn coarse_forward(
        &self,
        sess: &mut TapeSession,
        frames: &[&PaddedFrame],
    ) -> Result<CoarseForward, HarnessError> {
        if frames.is_empty() {
            return Err(HarnessError::Config("coarse forward needs at least one frame".into()));
        }
        let mut groups = Vec::new();
        let mut counts = vec![0usize; frames.len()];
        let mut centroids = Vec::with_capacity(frames.len());
        for (i, frame) in frames.iter().enumerate() {
            centroids.push(valid_centroid(frame));
            if self.frame_encodable(frame) {
                let prepared = self.pc.prepare(frame)?;
                counts[i] = prepared.anchor_count;
                groups.push(prepared);
            }
        }
        let (f_j, c_glo) = if groups.is_empty() {
            self.grc.forward(sess, frames.len(), None)?
        } else {
            let tokens = self.pc.forward(sess, &groups)?;
            self.grc.forward(sess, frames.len(), Some(TokenBatch { tokens, counts: &counts }))?
        };
        let coarse_rows = self.coarse.forward(sess, f_j)?;
        Ok(CoarseForward { f_j, c_glo, coarse_rows, centroids })
    }
}
