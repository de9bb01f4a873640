//! Conditioning embeddings for the pose-refinement denoiser.
//!
//! Four producers turn padded point-cloud frames and pose history into
//! per-joint feature rows, batched as `(B·17, width)` matrices on the
//! training tape:
//!
//! * **global context** ([`grc::GrcSpec`]): point-cloud tokens attend with
//!   a trainable joint-feature template; also feeds the coarse pose
//!   decoder ([`grc::CoarseDecoderSpec`]).
//! * **local context** ([`lrc::LrcSpec`]): per-joint neighborhoods around
//!   dynamic joint anchors, weighted by a point-support reliability score.
//! * **limb lengths** ([`slc::SlcSpec`]): explicit nonnegative bone-length
//!   estimates broadcast to every joint.
//! * **motion history** ([`tmc::TmcSpec`]): a short window of recent
//!   coarse poses collapsed along time.
//!
//! Any producer may be switched off (ablation or missing input); the
//! denoiser treats an absent member of [`ConditionSet`] as zero.

pub mod grc;
pub mod lrc;
pub mod pc;
pub mod slc;
pub mod tmc;

use crate::nn::tape::TensorId;
use crate::nn::NnError;
use crate::skeleton::PoseError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grc::{CoarseDecoderSpec, GrcProbe, GrcSpec, TokenBatch};
pub use lrc::{LocalNeighborhoods, LrcSpec};
pub use pc::{valid_centroid, PcEncoderSpec, PcGroups, POINT_FEATURES};
pub use slc::SlcSpec;
pub use tmc::TmcSpec;

/// Width of the global-context condition rows.
pub const GLO_DIM: usize = 64;
/// Width of the local-context condition rows.
pub const LOC_DIM: usize = 64;
/// Width of the denoiser's joint embedding; limb and motion conditions
/// are produced at this width directly, the two context conditions are
/// projected up at injection.
pub const POSE_EMBED_DIM: usize = 96;

#[derive(Debug, Error)]
pub enum CondError {
    #[error("frame has {n_valid} valid points, conditioning needs at least {min}")]
    TooFewPoints { n_valid: usize, min: usize },
    #[error("frame has no valid points")]
    EmptyCloud,
    #[error("pose history is empty")]
    EmptyHistory,
    #[error("bad conditioning config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

/// Sizes and knobs for every condition producer. [`Default`] is the
/// desk-scale profile (CPU-trainable in minutes); [`CondConfig::paper`]
/// restores the full-scale widths and depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondConfig {
    /// Width of joint tokens and the template (`d_j`).
    pub d_joint: usize,
    /// Width of point-cloud anchor tokens (`d_r`).
    pub d_point: usize,
    /// Global transformer depth.
    pub global_depth: usize,
    pub global_heads: usize,
    pub global_ffn_hidden: usize,
    /// Local (per-joint) transformer depth.
    pub local_depth: usize,
    pub local_heads: usize,
    /// Token width of the local transformer (and its embedding MLP).
    pub local_width: usize,
    pub local_ffn_hidden: usize,
    /// Neighbors per joint anchor (`K̄`).
    pub neighbor_count: usize,
    /// Neighbor distance that counts as supporting a joint anchor.
    pub reliability_radius_m: f64,
    /// Valid points per sampled anchor: anchor count is
    /// `ceil(n_valid / fps_stride)`.
    pub fps_stride: usize,
    pub ball_radius_m: f64,
    pub ball_samples: usize,
    /// Frames with fewer valid points than this cannot be encoded.
    pub min_valid_points: usize,
    /// Motion-history window length (`Δt`).
    pub history_window: usize,
    /// Dropout rate inside the condition producers.
    pub dropout: f64,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self {
            d_joint: 128,
            d_point: 256,
            global_depth: 4,
            global_heads: 4,
            global_ffn_hidden: 128,
            local_depth: 2,
            local_heads: 4,
            local_width: 64,
            local_ffn_hidden: 64,
            neighbor_count: 16,
            reliability_radius_m: 0.04,
            fps_stride: 32,
            ball_radius_m: 0.1,
            ball_samples: 32,
            min_valid_points: 4,
            history_window: 8,
            dropout: 0.1,
        }
    }
}

impl CondConfig {
    /// Full-scale profile.
    pub fn paper() -> Self {
        Self {
            d_joint: 1024,
            d_point: 1024,
            global_depth: 10,
            global_heads: 8,
            global_ffn_hidden: 256,
            local_depth: 5,
            local_heads: 8,
            local_width: 64,
            local_ffn_hidden: 96,
            neighbor_count: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CondError> {
        let positive = [
            ("d_joint", self.d_joint),
            ("d_point", self.d_point),
            ("global_depth", self.global_depth),
            ("global_heads", self.global_heads),
            ("global_ffn_hidden", self.global_ffn_hidden),
            ("local_depth", self.local_depth),
            ("local_heads", self.local_heads),
            ("local_width", self.local_width),
            ("local_ffn_hidden", self.local_ffn_hidden),
            ("neighbor_count", self.neighbor_count),
            ("fps_stride", self.fps_stride),
            ("ball_samples", self.ball_samples),
            ("min_valid_points", self.min_valid_points),
            ("history_window", self.history_window),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(CondError::BadConfig(format!("{name} must be positive")));
            }
        }
        for (name, value) in [
            ("reliability_radius_m", self.reliability_radius_m),
            ("ball_radius_m", self.ball_radius_m),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(CondError::BadConfig(format!("{name} must be positive, got {value}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CondError::BadConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.d_joint % self.global_heads != 0 || self.local_width % self.local_heads != 0 {
            return Err(CondError::BadConfig(
                "attention widths must be divisible by their head counts".into(),
            ));
        }
        Ok(())
    }
}

/// The four per-joint condition embeddings for one batch, as tensors on a
/// live tape. Absent members are injected as zero by the denoiser.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionSet {
    /// `(B·17, 64)` global-context rows.
    pub c_glo: Option<TensorId>,
    /// `(B·17, 64)` local-context rows.
    pub c_loc: Option<TensorId>,
    /// `(B·17, 96)` limb-length rows (identical within each sample).
    pub c_lim: Option<TensorId>,
    /// `(B·17, 96)` motion-history rows.
    pub c_tem: Option<TensorId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_is_valid_and_paper_profile_scales_up() {
        let desk = CondConfig::default();
        desk.validate().unwrap();
        let paper = CondConfig::paper();
        paper.validate().unwrap();
        assert!(paper.d_joint > desk.d_joint);
        assert!(paper.global_depth > desk.global_depth);
        assert!(paper.neighbor_count > desk.neighbor_count);
        // Shared geometry constants are profile-independent.
        assert_eq!(paper.ball_radius_m, desk.ball_radius_m);
        assert_eq!(paper.reliability_radius_m, desk.reliability_radius_m);
        assert_eq!(paper.history_window, desk.history_window);
    }

    #[test]
    fn validate_rejects_bad_knobs() {
        let mut cfg = CondConfig::default();
        cfg.global_heads = 3; // 128 % 3 != 0
        assert!(matches!(cfg.validate(), Err(CondError::BadConfig(_))));

        let mut cfg = CondConfig::default();
        cfg.dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(CondError::BadConfig(_))));

        let mut cfg = CondConfig::default();
        cfg.ball_radius_m = 0.0;
        assert!(matches!(cfg.validate(), Err(CondError::BadConfig(_))));

        let mut cfg = CondConfig::default();
        cfg.history_window = 0;
        assert!(matches!(cfg.validate(), Err(CondError::BadConfig(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = CondConfig::paper();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: CondConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Unknown keys are rejected (config files fail loudly on typos).
        let bad = serde_json::from_str::<CondConfig>("{\"d_joint\": 8, \"nope\": 1}");
        assert!(bad.is_err());
    }
}
