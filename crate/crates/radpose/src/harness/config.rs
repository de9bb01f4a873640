//! Run configuration: one JSON document selecting the dataset, model
//! profile, optimizer settings, and every knob the training, inference, and
//! evaluation workflows read.
//!
//! A config file may specify any subset of keys. Missing keys are completed
//! from the profile named by its `profile` key (`desk` by default), unknown
//! keys are rejected, and every file referenced by the completed config must
//! exist at load time.

use super::HarnessError;
use crate::cond::CondConfig;
use crate::dataset::DatasetManifest;
use crate::diffusion::{make_schedule, DiffusionSchedule, SamplerMode, ScheduleMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Scale preset: `desk` trains in minutes on one CPU core, `paper` restores
/// the full-scale widths, depths, batch size, and learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

/// Adam settings shared by both training phases. `momentum` is the
/// first-moment decay; gradients are rescaled whenever their global L2 norm
/// exceeds `gradient_clip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub second_moment: f64,
    pub epsilon: f64,
    pub gradient_clip: f64,
}

impl Default for OptimizerConfig {
    /// Desk-scale settings: same moments and clip as the full-scale run,
    /// with a learning rate suited to the small model and short schedule.
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            momentum: 0.9,
            second_moment: 0.999,
            epsilon: 1e-8,
            gradient_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Full-scale settings: learning rate 2e-5, momentum 0.9, clip 1.0.
    pub fn paper() -> Self {
        Self { learning_rate: 2e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("gradient_clip", self.gradient_clip),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(HarnessError::Config(format!("optimizer {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("second_moment", self.second_moment)] {
            if !(0.0..1.0).contains(&v) {
                return Err(HarnessError::Config(format!("optimizer {name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Noise-schedule preset plus the sampler variant used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub mode: ScheduleMode,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub sampler: SamplerMode,
}

impl Default for ScheduleConfig {
    /// 25 constant steps at β = 0.001 with the clean-estimate sampler.
    fn default() -> Self {
        Self {
            steps: 25,
            mode: ScheduleMode::Constant,
            beta_lo: 1e-3,
            beta_hi: 1e-3,
            sampler: SamplerMode::XZero,
        }
    }
}

impl ScheduleConfig {
    pub fn make(&self) -> Result<DiffusionSchedule, HarnessError> {
        Ok(make_schedule(self.steps, self.mode, self.beta_lo, self.beta_hi)?)
    }
}

/// Everything a run needs. Field defaults are the desk profile; see
/// [`RunConfig::paper`] for the full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Dataset directory (the layout written by `simulate`).
    pub dataset: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Condition-producer sizes, including the history window Δt
    /// (`history_window`) and per-joint neighbor count K̄ (`neighbor_count`).
    pub conditioning: CondConfig,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    /// λ weighting the L1 limb-length term inside the phase-2 loss.
    pub limb_loss_weight: f64,
    /// M pose hypotheses sampled and averaged per frame at inference.
    pub hypotheses: usize,
    /// Decay of the exponential moving average kept over phase-2 weights;
    /// inference and evaluation read the averaged weights.
    pub ema_decay: f64,
    pub seed: u64,
    /// Seeds the multi-seed evaluation helper runs when asked for spread.
    pub eval_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            dataset: PathBuf::new(),
            train_split: "train".into(),
            eval_split: "test".into(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            conditioning: desk_conditioning(),
            epochs_phase1: 40,
            epochs_phase2: 25,
            batch_size: 64,
            limb_loss_weight: 5.0,
            hypotheses: 2,
            // Desk schedules take only a few hundred optimizer steps, so
            // the full-scale 0.999 decay would leave most of the random
            // init in the average; 0.99 converges onto the trained
            // weights within such a run.
            ema_decay: 0.99,
            seed: 0,
            eval_seeds: vec![0, 1, 2],
        }
    }
}

/// Condition-producer sizes small enough for CPU training in minutes. The
/// local width stays at the 64-wide contract; geometry constants (radii,
/// window, neighbor count) match the full-scale run.
fn desk_conditioning() -> CondConfig {
    CondConfig {
        d_joint: 64,
        d_point: 64,
        global_depth: 2,
        global_heads: 4,
        global_ffn_hidden: 64,
        local_depth: 1,
        local_heads: 4,
        local_ffn_hidden: 64,
        ball_samples: 16,
        ..CondConfig::default()
    }
}

impl RunConfig {
    /// Desk profile pointed at `dataset`.
    pub fn desk(dataset: impl Into<PathBuf>) -> Self {
        Self { dataset: dataset.into(), ..Self::default() }
    }

    /// Full-scale profile: every width, depth, batch size, hypothesis count,
    /// and learning rate at its published value.
    pub fn paper(dataset: impl Into<PathBuf>) -> Self {
        Self {
            profile: Profile::Paper,
            dataset: dataset.into(),
            optimizer: OptimizerConfig::paper(),
            conditioning: CondConfig::paper(),
            epochs_phase1: 100,
            epochs_phase2: 100,
            batch_size: 1024,
            hypotheses: 5,
            ema_decay: 0.999,
            ..Self::default()
        }
    }

    /// Builds a config from a parsed JSON document: the `profile` key picks
    /// the default set, the document's keys override it, and unknown keys
    /// anywhere in the tree are rejected.
    pub fn from_value(value: serde_json::Value) -> Result<Self, HarnessError> {
        if !value.is_object() {
            return Err(HarnessError::Config("config root must be a JSON object".into()));
        }
        let profile = match value.get("profile") {
            None => Profile::Desk,
            Some(raw) => serde_json::from_value(raw.clone())
                .map_err(|e| HarnessError::Config(format!("bad profile: {e}")))?,
        };
        let base = match profile {
            Profile::Desk => Self::desk(PathBuf::new()),
            Profile::Paper => Self::paper(PathBuf::new()),
        };
        let mut merged = serde_json::to_value(&base)
            .map_err(|e| HarnessError::Config(format!("profile defaults: {e}")))?;
        deep_merge(&mut merged, value);
        serde_json::from_value(merged).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    /// Loads, completes, and validates a config file, including the
    /// existence of every file the completed config references.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        let value = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let config = Self::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    /// Checks value ranges and that the referenced dataset files exist.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.validate_shape()?;
        if self.dataset.as_os_str().is_empty() {
            return Err(HarnessError::Config("config names no dataset directory".into()));
        }
        self.check_dataset_files()
    }

    /// Value-range checks alone, for callers that already hold the dataset
    /// in memory.
    pub fn validate_shape(&self) -> Result<(), HarnessError> {
        self.optimizer.validate()?;
        self.schedule.make()?;
        self.conditioning.validate()?;
        for (name, v) in [
            ("epochs_phase1", self.epochs_phase1),
            ("epochs_phase2", self.epochs_phase2),
            ("batch_size", self.batch_size),
            ("hypotheses", self.hypotheses),
        ] {
            if v == 0 {
                return Err(HarnessError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.limb_loss_weight.is_finite() && self.limb_loss_weight >= 0.0) {
            return Err(HarnessError::Config(format!(
                "limb_loss_weight must be finite and non-negative, got {}",
                self.limb_loss_weight
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(HarnessError::Config(format!(
                "ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.train_split.is_empty() || self.eval_split.is_empty() {
            return Err(HarnessError::Config("split names must be non-empty".into()));
        }
        Ok(())
    }

    /// Every file the dataset manifest implies must already exist.
    fn check_dataset_files(&self) -> Result<(), HarnessError> {
        let manifest_path = self.dataset.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|source| HarnessError::Io { path: manifest_path.clone(), source })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", manifest_path.display())))?;
        for split in &manifest.splits {
            for file in ["poses.f32", "points.f32", "mask.u8"] {
                let path = self.dataset.join(&split.name).join(file);
                if !path.is_file() {
                    return Err(HarnessError::Config(format!(
                        "dataset file missing: {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Recursively overlays `over` onto `base`: objects merge key by key,
/// anything else replaces the base value.
fn deep_merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(over_map)) => {
            for (key, value) in over_map {
                match base_map.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base_map.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}
