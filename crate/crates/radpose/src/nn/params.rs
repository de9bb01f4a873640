//! Named parameter storage, EMA shadows, and the checkpoint format.
//!
//! Parameters live in a sorted map so every enumeration (checkpoint layout,
//! optimizer sweeps, gradient reports) is deterministic. Checkpoints are a
//! directory holding `manifest.json` (names, shapes, training step, EMA
//! flag) and `params.f32`, the little-endian 32-bit concatenation of all
//! arrays in manifest order; EMA shadows are stored as additional
//! `<name>.ema` entries. Training math runs in f64; serialization rounds to
//! f32 once, so a saved-then-loaded store re-saves byte-identically.

use super::tape::{Tape, TensorId};
use super::NnError;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const EMA_SUFFIX: &str = ".ema";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint file missing: {0}")]
    MissingFile(PathBuf),
    #[error("checkpoint payload {path} holds {actual} bytes, expected {expected}")]
    SizeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("manifest invalid: {0}")]
    BadManifest(String),
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest parse failure: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    step: u64,
    has_ema: bool,
    entries: Vec<ManifestEntry>,
}

/// Uniform Xavier/Glorot initialization: ±sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

/// Sorted name → array storage with optional EMA shadows and freeze list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Array2<f64>>,
    ema: BTreeMap<String, Array2<f64>>,
    frozen_prefixes: Vec<String>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<(), NnError> {
        if name.ends_with(EMA_SUFFIX) {
            return Err(NnError::BadConfig(format!(
                "parameter name '{name}' collides with the EMA shadow suffix"
            )));
        }
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>, NnError> {
        self.params.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), NnError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if slot.raw_dim() != value.raw_dim() {
            return Err(NnError::Shape {
                op: "ParameterStore::set",
                detail: format!(
                    "'{name}' holds {:?}, new value is {:?}",
                    slot.raw_dim(),
                    value.raw_dim()
                ),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Marks every parameter whose name starts with `prefix` as untrainable;
    /// sessions bind them as constants and optimizers must skip them.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        if !self.frozen_prefixes.iter().any(|p| p == prefix) {
            self.frozen_prefixes.push(prefix.to_string());
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Starts EMA tracking for every parameter under `prefix`, seeding each
    /// shadow with the current value.
    pub fn ema_init(&mut self, prefix: &str) {
        for (name, value) in &self.params {
            if name.starts_with(prefix) && !self.ema.contains_key(name) {
                self.ema.insert(name.clone(), value.clone());
            }
        }
    }

    pub fn has_ema(&self) -> bool {
        !self.ema.is_empty()
    }

    /// shadow ← decay·shadow + (1−decay)·param for every tracked shadow.
    pub fn ema_update(&mut self, decay: f64) {
        for (name, shadow) in &mut self.ema {
            let param = &self.params[name];
            shadow.zip_mut_with(param, |s, &p| *s = decay * *s + (1.0 - decay) * p);
        }
    }

    pub fn ema_value(&self, name: &str) -> Option<&Array2<f64>> {
        self.ema.get(name)
    }

    /// Evaluation copy in which every EMA-tracked parameter is replaced by
    /// its shadow. Untracked parameters pass through unchanged.
    pub fn ema_snapshot(&self) -> ParameterStore {
        let mut out = self.clone();
        for (name, shadow) in &self.ema {
            out.params.insert(name.clone(), shadow.clone());
        }
        out
    }

    fn manifest(&self) -> CheckpointManifest {
        // BTreeMap order is sorted by name; ".ema" entries ride along under
        // their suffixed names, interleaved deterministically.
        let mut names: Vec<(String, &Array2<f64>)> = self
            .params
            .iter()
            .map(|(n, v)| (n.clone(), v))
            .chain(self.ema.iter().map(|(n, v)| (format!("{n}{EMA_SUFFIX}"), v)))
            .collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            has_ema: !self.ema.is_empty(),
            entries: names
                .into_iter()
                .map(|(name, v)| ManifestEntry { name, rows: v.nrows(), cols: v.ncols() })
                .collect(),
        }
    }

    fn array_for_entry(&self, name: &str) -> &Array2<f64> {
        match name.strip_suffix(EMA_SUFFIX) {
            Some(base) if self.ema.contains_key(base) => &self.ema[base],
            _ => &self.params[name],
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes `manifest.json` + `params.f32` under `dir` (created if needed).
pub fn save_checkpoint(store: &ParameterStore, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = store.manifest();
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(io_err(&manifest_path))?;

    let total: usize = manifest.entries.iter().map(|e| e.rows * e.cols).sum();
    let mut bytes = Vec::with_capacity(total * 4);
    for entry in &manifest.entries {
        for &v in store.array_for_entry(&entry.name) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let payload_path = dir.join("params.f32");
    fs::write(&payload_path, bytes).map_err(io_err(&payload_path))
}

/// Loads a checkpoint saved by [`save_checkpoint`]. Values come back as the
/// f32 they were stored as, widened to f64.
pub fn load_checkpoint(dir: &Path) -> Result<ParameterStore, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CheckpointError::MissingFile(manifest_path));
    }
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }

    let payload_path = dir.join("params.f32");
    if !payload_path.exists() {
        return Err(CheckpointError::MissingFile(payload_path));
    }
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    let expected: usize = manifest.entries.iter().map(|e| e.rows * e.cols * 4).sum();
    if bytes.len() != expected {
        return Err(CheckpointError::SizeMismatch {
            path: payload_path,
            expected,
            actual: bytes.len(),
        });
    }

    let mut store = ParameterStore::new();
    store.set_step(manifest.step);
    let mut offset = 0usize;
    for entry in &manifest.entries {
        let count = entry.rows * entry.cols;
        let values: Vec<f64> = bytes[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += count * 4;
        let array = Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| CheckpointError::BadManifest(format!("entry '{}': {e}", entry.name)))?;
        match entry.name.strip_suffix(EMA_SUFFIX) {
            Some(base) => {
                store.ema.insert(base.to_string(), array);
            }
            None => {
                if store.params.insert(entry.name.clone(), array).is_some() {
                    return Err(CheckpointError::BadManifest(format!(
                        "duplicate entry '{}'",
                        entry.name
                    )));
                }
            }
        }
    }
    if manifest.has_ema != !store.ema.is_empty() {
        return Err(CheckpointError::BadManifest("has_ema flag disagrees with entries".into()));
    }
    for name in store.ema.keys() {
        if !store.params.contains_key(name) {
            return Err(CheckpointError::BadManifest(format!(
                "EMA shadow '{name}{EMA_SUFFIX}' has no base parameter"
            )));
        }
    }
    Ok(store)
}

/// One forward-build pass: a tape plus memoized parameter bindings.
///
/// Frozen parameters bind as constants, so no backward work is spent on
/// them and they can never receive updates. Dropout draws its masks from a
/// session-owned seeded stream; in eval mode it is the identity.
pub struct TapeSession<'a> {
    pub tape: Tape,
    store: &'a ParameterStore,
    bound: BTreeMap<String, TensorId>,
    train: bool,
    dropout_rng: ChaCha8Rng,
}

impl<'a> TapeSession<'a> {
    pub fn new(store: &'a ParameterStore, train: bool, dropout_seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            train,
            dropout_rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId, NnError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = if self.store.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inverted dropout: keep with probability 1−p and rescale, so eval
    /// needs no correction. `p ≥ 1` zeroes everything.
    pub fn dropout(&mut self, x: TensorId, p: f64) -> TensorId {
        if !self.train || p <= 0.0 {
            return x;
        }
        let shape = self.tape.value(x).raw_dim();
        let mask = if p >= 1.0 {
            Array2::zeros(shape)
        } else {
            let scale = 1.0 / (1.0 - p);
            Array2::from_shape_fn(shape, |_| {
                if self.dropout_rng.random::<f64>() < p {
                    0.0
                } else {
                    scale
                }
            })
        };
        let mask = self.tape.constant(mask);
        self.tape.mul_elem(x, mask)
    }

    /// Runs backward from `loss` and reports gradients for every bound
    /// trainable parameter, keyed by name.
    pub fn gradients(&self, loss: TensorId) -> BTreeMap<String, Array2<f64>> {
        let mut grads = self.tape.backward(loss);
        self.bound
            .iter()
            .filter(|(name, _)| !self.store.is_frozen(name))
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }
}
