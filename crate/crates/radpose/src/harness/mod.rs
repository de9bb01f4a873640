//! Workflows tying the whole pipeline together: dataset production,
//! two-phase training, frame-by-frame refinement, and evaluation reports,
//! plus the `run.json` sidecar every workflow writes so results can be
//! traced back to exact inputs.

pub mod config;
pub mod data;
pub mod eval;
pub mod infer;
pub mod model;
pub mod optim;
pub mod simulate;
pub mod train;

pub use config::{OptimizerConfig, Profile, RunConfig, ScheduleConfig};
pub use data::{epoch_batches, SplitView};
pub use eval::{
    evaluate, summarize_seeds, write_report, EvalReport, FrameScore, LimbStat, SceneReport,
    SeedSpread, SeedSummary,
};
pub use infer::{
    infer_split, read_predictions, write_predictions, AblationFlags, InferOptions, InferenceResult,
    PredictionIndex,
};
pub use model::{CoarseForward, PoseModel, PHASE1_PREFIXES, PHASE2_PREFIXES};
pub use optim::Adam;
pub use simulate::{simulate_dataset, simulate_to_dir, SimulateSpec};
pub use train::{coarse_inference, train_phase1, train_phase2, TrainReport};

use crate::cond::CondError;
use crate::dataset::DataError;
use crate::diffusion::DiffusionError;
use crate::nn::params::CheckpointError;
use crate::nn::NnError;
use crate::radar::RadarError;
use crate::skeleton::PoseError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Anything a workflow can fail with; lower-level errors keep their type.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset has no split named '{0}'")]
    SplitNotFound(String),
    #[error("prediction/ground-truth frame counts differ: {predictions} predicted vs {ground_truth} ground-truth frames")]
    FrameCountMismatch { predictions: usize, ground_truth: usize },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Cond(#[from] CondError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Splitmix64 finalizer over the base seed and two stream tags. Every
/// workflow derives its per-epoch / per-frame / per-component seeds through
/// this so streams never collide and runs stay reproducible.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.rotate_left(24) ^ index.rotate_left(48);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SHA-256 of one file's bytes, hex-encoded.
pub fn hash_file(path: &Path) -> Result<String, HarnessError> {
    let bytes =
        std::fs::read(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

/// Content hash of a file or directory tree: directories hash the sorted
/// list of (relative path, file hash) pairs, so the result depends only on
/// names and bytes, never on timestamps or visit order.
pub fn hash_path(path: &Path) -> Result<String, HarnessError> {
    if path.is_dir() {
        let mut entries = Vec::new();
        collect_files(path, path, &mut entries)?;
        entries.sort();
        let mut hasher = Sha256::new();
        for relative in entries {
            hasher.update(relative.as_bytes());
            hasher.update([0]);
            hasher.update(hash_file(&path.join(&relative))?.as_bytes());
            hasher.update([b'\n']);
        }
        Ok(hex(&hasher.finalize()))
    } else {
        hash_file(path)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io { path: dir.to_path_buf(), source };
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let relative = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace(std::path::MAIN_SEPARATOR, "/");
            out.push(relative);
        }
    }
    Ok(())
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The `run.json` sidecar: which command ran, with which fully-resolved
/// configuration, over inputs with which content hashes, producing which
/// files. Deliberately carries no timestamps so identical runs produce
/// identical sidecars.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub resolved_config: serde_json::Value,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    /// Files the run wrote, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: impl Into<String>, seed: u64, config: &impl Serialize) -> Self {
        Self {
            command: command.into(),
            seed,
            resolved_config: serde_json::to_value(config)
                .expect("config types serialize infallibly"),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Records `path` as an input, hashing its current content.
    pub fn record_input(&mut self, path: &Path) -> Result<(), HarnessError> {
        self.inputs.insert(path.to_string_lossy().into_owned(), hash_path(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    /// Writes `run.json` into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Config(format!("run record: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|source| HarnessError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}
