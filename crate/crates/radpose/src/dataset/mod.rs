//! Frame aggregation, cropping, padding, and the on-disk dataset format.
//!
//! The preprocessing pipeline is `concat_frames` (recent-frame window) →
//! `crop_region` (axis-aligned box around a center) → `pad_to` (fixed-shape
//! tensor with validity mask). Datasets persist as a directory holding a
//! `manifest.json` plus one subdirectory per split with three flat binary
//! payloads: `poses.f32` laid out `[frame][joint][xyz]`, `points.f32` laid
//! out `[frame][n_max][6]` (both little-endian 32-bit floats), and `mask.u8`
//! laid out `[frame][n_max]` with one byte per point slot. The format is
//! deliberately dumb so any language can read it back bit-exactly.

use crate::radar::{MotionPreset, NoiseModel, PointCloudFrame, RadarConfig};
use crate::skeleton::JOINT_COUNT;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Bumped whenever the directory layout or payload encoding changes.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Number of scalar features per radar point: x, y, z, v, E, A.
pub const POINT_FEATURES: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no frames to aggregate")]
    EmptyInput,
    #[error("aggregation window must be at least 1")]
    BadWindow,
    #[error("crop half-extent must be positive, got {0}")]
    BadHalfExtent(f64),
    #[error("padded size must be at least 1")]
    BadPadSize,
    #[error("padded rows with an unset mask must be all-zero (row {0})")]
    DirtyPadding(usize),
    #[error("dataset payload {path} holds {actual} bytes, expected {expected}")]
    SizeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("dataset format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset file missing: {0}")]
    MissingFile(PathBuf),
    #[error("manifest disagrees with payload: {0}")]
    InconsistentManifest(String),
    #[error("mask byte at frame {frame}, slot {slot} is {value}, expected 0 or 1")]
    BadMaskByte { frame: usize, slot: usize, value: u8 },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest parse failure: {0}")]
    Json(#[from] serde_json::Error),
}

/// A fixed-shape point tensor plus validity mask, ready for batching.
///
/// The first `n_valid` rows hold real points in their pre-padding order;
/// every row whose mask bit is false is all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedFrame {
    points: Array2<f32>,
    valid_mask: Vec<bool>,
    n_valid: usize,
}

impl PaddedFrame {
    pub fn new(points: Array2<f32>, valid_mask: Vec<bool>) -> Result<Self, DataError> {
        if points.nrows() != valid_mask.len() || points.ncols() != POINT_FEATURES {
            return Err(DataError::InconsistentManifest(format!(
                "padded tensor {}x{} does not match mask length {}",
                points.nrows(),
                points.ncols(),
                valid_mask.len()
            )));
        }
        for (row, &valid) in valid_mask.iter().enumerate() {
            if !valid && points.row(row).iter().any(|&v| v != 0.0) {
                return Err(DataError::DirtyPadding(row));
            }
        }
        let n_valid = valid_mask.iter().filter(|&&v| v).count();
        Ok(Self { points, valid_mask, n_valid })
    }

    pub fn points(&self) -> &Array2<f32> {
        &self.points
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    pub fn n_max(&self) -> usize {
        self.valid_mask.len()
    }
}

/// One rendered scene inside a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub name: String,
    pub preset: MotionPreset,
    pub frames: usize,
    pub frame_period: f64,
    /// Seed used for both subject synthesis and per-frame rendering.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub scenes: Vec<SceneInfo>,
}

impl SplitInfo {
    pub fn frame_count(&self) -> usize {
        self.scenes.iter().map(|s| s.frames).sum()
    }
}

/// Everything needed to interpret the binary payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_max: usize,
    /// How many recent frames are unioned per sample.
    pub concat_window: usize,
    pub crop_half_extent: f64,
    /// Base seed for over-capacity subsampling; frame index is added per frame.
    pub subsample_seed: u64,
    pub joint_count: usize,
    pub limb_edges: Vec<(usize, usize)>,
    pub radar: RadarConfig,
    pub noise: NoiseModel,
    pub splits: Vec<SplitInfo>,
}

/// In-memory payload of one split, mirroring the on-disk layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub name: String,
    /// `(frames, JOINT_COUNT * 3)` ground-truth joints, sensor frame, meters.
    pub poses: Array2<f32>,
    /// `(frames, n_max, POINT_FEATURES)` padded point tensors.
    pub points: Array3<f32>,
    /// `(frames, n_max)` validity mask, one byte per slot.
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: Vec<SplitData>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&SplitData> {
        self.splits.iter().find(|s| s.name == name)
    }
}

/// Unions the `m` most recent frames (fewer near the sequence start) into
/// one cloud, oldest window frame first, original order within each frame.
/// Timestamp and visibility come from the newest frame.
pub fn concat_frames(frames: &[PointCloudFrame], m: usize) -> Result<PointCloudFrame, DataError> {
    if m == 0 {
        return Err(DataError::BadWindow);
    }
    let newest = frames.last().ok_or(DataError::EmptyInput)?;
    let start = frames.len().saturating_sub(m);
    let points = frames[start..].iter().flat_map(|f| f.points.iter().copied()).collect();
    Ok(PointCloudFrame {
        points,
        timestamp: newest.timestamp,
        subject_visible: newest.subject_visible,
    })
}

/// Keeps points whose coordinates lie within `half_extent` of `center` on
/// every axis.
pub fn crop_region(
    frame: &PointCloudFrame,
    center: [f64; 3],
    half_extent: f64,
) -> Result<PointCloudFrame, DataError> {
    if !(half_extent.is_finite() && half_extent > 0.0) {
        return Err(DataError::BadHalfExtent(half_extent));
    }
    let points = frame
        .points
        .iter()
        .filter(|p| {
            p.position.iter().zip(&center).all(|(coord, c)| (coord - c).abs() <= half_extent)
        })
        .copied()
        .collect();
    Ok(PointCloudFrame {
        points,
        timestamp: frame.timestamp,
        subject_visible: frame.subject_visible,
    })
}

/// Packs a frame into an `n_max × 6` tensor with a validity mask, converting
/// features to f32. Inputs longer than `n_max` are reduced by a seeded
/// uniform subsample without replacement that preserves original order.
pub fn pad_to(frame: &PointCloudFrame, n_max: usize, seed: u64) -> Result<PaddedFrame, DataError> {
    if n_max == 0 {
        return Err(DataError::BadPadSize);
    }
    let kept: Vec<usize> = if frame.points.len() <= n_max {
        (0..frame.points.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..frame.points.len()).collect();
        // Partial Fisher-Yates: after i steps the prefix is a uniform draw.
        for i in 0..n_max {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        let mut chosen = indices[..n_max].to_vec();
        chosen.sort_unstable();
        chosen
    };

    let mut points = Array2::<f32>::zeros((n_max, POINT_FEATURES));
    let mut valid_mask = vec![false; n_max];
    for (row, &idx) in kept.iter().enumerate() {
        let feats = frame.points[idx].features();
        for (col, &value) in feats.iter().enumerate() {
            points[(row, col)] = value as f32;
        }
        valid_mask[row] = true;
    }
    PaddedFrame::new(points, valid_mask)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

fn read_exact_bytes(path: &Path, expected: usize) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn read_f32_le(path: &Path, expected_len: usize) -> Result<Vec<f32>, DataError> {
    let bytes = read_exact_bytes(path, expected_len * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_consistency(dataset: &Dataset) -> Result<(), DataError> {
    let m = &dataset.manifest;
    if m.joint_count != JOINT_COUNT {
        return Err(DataError::InconsistentManifest(format!(
            "joint_count {} unsupported (expected {JOINT_COUNT})",
            m.joint_count
        )));
    }
    if m.splits.len() != dataset.splits.len() {
        return Err(DataError::InconsistentManifest(format!(
            "{} splits declared, {} present",
            m.splits.len(),
            dataset.splits.len()
        )));
    }
    for (info, data) in m.splits.iter().zip(&dataset.splits) {
        let frames = info.frame_count();
        if info.name != data.name {
            return Err(DataError::InconsistentManifest(format!(
                "split order mismatch: {} vs {}",
                info.name, data.name
            )));
        }
        if data.poses.dim() != (frames, JOINT_COUNT * 3)
            || data.points.dim() != (frames, m.n_max, POINT_FEATURES)
            || data.mask.dim() != (frames, m.n_max)
        {
            return Err(DataError::InconsistentManifest(format!(
                "split '{}' payload shapes do not match {} frames × n_max {}",
                info.name, frames, m.n_max
            )));
        }
    }
    Ok(())
}

/// Persists a dataset under `dir` (created if needed).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    check_consistency(dataset)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    for split in &dataset.splits {
        let split_dir = dir.join(&split.name);
        fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        write_f32_le(&split_dir.join("poses.f32"), split.poses.as_slice().unwrap())?;
        write_f32_le(&split_dir.join("points.f32"), split.points.as_slice().unwrap())?;
        let mask_path = split_dir.join("mask.u8");
        fs::write(&mask_path, split.mask.as_slice().unwrap()).map_err(io_err(&mask_path))?;
    }
    Ok(())
}

/// Loads a dataset written by [`write_dataset`], validating version and
/// payload sizes before touching any contents.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(DataError::MissingFile(manifest_path));
    }
    let json = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }

    let mut splits = Vec::with_capacity(manifest.splits.len());
    for info in &manifest.splits {
        let split_dir = dir.join(&info.name);
        let frames = info.frame_count();
        let poses = read_f32_le(&split_dir.join("poses.f32"), frames * JOINT_COUNT * 3)?;
        let points =
            read_f32_le(&split_dir.join("points.f32"), frames * manifest.n_max * POINT_FEATURES)?;
        let mask_bytes = read_exact_bytes(&split_dir.join("mask.u8"), frames * manifest.n_max)?;
        for (i, &b) in mask_bytes.iter().enumerate() {
            if b > 1 {
                return Err(DataError::BadMaskByte {
                    frame: i / manifest.n_max,
                    slot: i % manifest.n_max,
                    value: b,
                });
            }
        }
        splits.push(SplitData {
            name: info.name.clone(),
            poses: Array2::from_shape_vec((frames, JOINT_COUNT * 3), poses)
                .expect("validated length"),
            points: Array3::from_shape_vec((frames, manifest.n_max, POINT_FEATURES), points)
                .expect("validated length"),
            mask: Array2::from_shape_vec((frames, manifest.n_max), mask_bytes)
                .expect("validated length"),
        });
    }
    let dataset = Dataset { manifest, splits };
    check_consistency(&dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::RadarPoint;

    fn point(x: f64, y: f64, z: f64) -> RadarPoint {
        RadarPoint { position: [x, y, z], radial_velocity: 0.1, energy: 0.04, amplitude: 0.2 }
    }

    fn cloud(n: usize, offset: f64) -> PointCloudFrame {
        PointCloudFrame {
            points: (0..n)
                .map(|i| point(offset + i as f64 * 0.01, 3.0, 0.5))
                .collect(),
            timestamp: offset,
            subject_visible: true,
        }
    }

    fn seeded_cloud(n: usize, seed: u64) -> PointCloudFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloudFrame {
            points: (0..n)
                .map(|_| {
                    point(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.5..7.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect(),
            timestamp: 0.0,
            subject_visible: true,
        }
    }

    #[test]
    fn concat_window_of_one_is_identity() {
        let frames = vec![cloud(5, 0.0), cloud(7, 1.0)];
        let out = concat_frames(&frames, 1).unwrap();
        assert_eq!(out, frames[1]);
    }

    #[test]
    fn concat_counts_are_additive() {
        let frames = vec![cloud(30, 0.0), cloud(0, 1.0), cloud(25, 2.0), cloud(45, 3.0)];
        let out = concat_frames(&frames, 4).unwrap();
        assert_eq!(out.points.len(), 100);
        assert_eq!(out.timestamp, 3.0);
        // Chronological-then-original order: first point comes from frame 0.
        assert_eq!(out.points[0], frames[0].points[0]);
        assert_eq!(out.points[99], frames[3].points[44]);
    }

    #[test]
    fn concat_at_sequence_start_uses_what_exists() {
        let frames = vec![cloud(9, 0.0)];
        let out = concat_frames(&frames, 4).unwrap();
        assert_eq!(out, frames[0]);
        assert!(concat_frames(&[], 4).is_err());
        assert!(concat_frames(&frames, 0).is_err());
    }

    #[test]
    fn crop_keeps_inside_drops_outside() {
        let inside = cloud(10, 0.0);
        let out = crop_region(&inside, [0.05, 3.0, 0.5], 1.6).unwrap();
        assert_eq!(out, inside);

        let far = crop_region(&inside, [50.0, 3.0, 0.5], 1.6).unwrap();
        assert!(far.points.is_empty());
        assert_eq!(far.timestamp, inside.timestamp);
    }

    #[test]
    fn crop_matches_per_point_filter_oracle() {
        for seed in 0..20 {
            let frame = seeded_cloud(64, seed);
            let center = [0.3, 3.2, -0.1];
            let he = 1.2;
            let cropped = crop_region(&frame, center, he).unwrap();
            let expected: Vec<RadarPoint> = frame
                .points
                .iter()
                .filter(|p| {
                    (p.position[0] - center[0]).abs() <= he
                        && (p.position[1] - center[1]).abs() <= he
                        && (p.position[2] - center[2]).abs() <= he
                })
                .copied()
                .collect();
            assert_eq!(cropped.points, expected);
        }
    }

    #[test]
    fn crop_is_idempotent() {
        for seed in 0..20 {
            let frame = seeded_cloud(80, seed);
            let once = crop_region(&frame, [0.0, 3.5, 0.0], 1.6).unwrap();
            let twice = crop_region(&once, [0.0, 3.5, 0.0], 1.6).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn crop_rejects_bad_extent() {
        assert!(crop_region(&cloud(1, 0.0), [0.0; 3], 0.0).is_err());
        assert!(crop_region(&cloud(1, 0.0), [0.0; 3], f64::NAN).is_err());
    }

    #[test]
    fn pad_identity_at_capacity_and_zero_case() {
        let frame = cloud(8, 0.0);
        let padded = pad_to(&frame, 8, 1).unwrap();
        assert_eq!(padded.n_valid(), 8);
        assert!(padded.valid_mask().iter().all(|&v| v));
        for (row, p) in frame.points.iter().enumerate() {
            for (col, &f) in p.features().iter().enumerate() {
                assert_eq!(padded.points()[(row, col)], f as f32);
            }
        }

        let empty = pad_to(&cloud(0, 0.0), 8, 1).unwrap();
        assert_eq!(empty.n_valid(), 0);
        assert!(empty.valid_mask().iter().all(|&v| !v));
        assert!(empty.points().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_preserves_points_and_zeroes_tail_when_under_capacity() {
        let frame = seeded_cloud(5, 3);
        let padded = pad_to(&frame, 12, 99).unwrap();
        assert_eq!(padded.n_valid(), 5);
        for (row, p) in frame.points.iter().enumerate() {
            for (col, &f) in p.features().iter().enumerate() {
                assert_eq!(padded.points()[(row, col)], f as f32);
            }
        }
        for row in 5..12 {
            assert!(!padded.valid_mask()[row]);
            assert!(padded.points().row(row).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pad_subsample_is_deterministic_ordered_subset() {
        let frame = seeded_cloud(22, 4);
        let a = pad_to(&frame, 12, 31).unwrap();
        let b = pad_to(&frame, 12, 31).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_valid(), 12);

        // Every kept row must be an input point, in original relative order.
        let feats: Vec<Vec<f32>> = frame
            .points
            .iter()
            .map(|p| p.features().iter().map(|&f| f as f32).collect())
            .collect();
        let mut cursor = 0usize;
        for row in 0..12 {
            let row_vals: Vec<f32> = a.points().row(row).to_vec();
            let found = (cursor..feats.len()).find(|&i| feats[i] == row_vals);
            let idx = found.expect("kept row must match a later input point");
            cursor = idx + 1;
        }

        let c = pad_to(&frame, 12, 32).unwrap();
        assert_ne!(a, c, "different seeds should pick different subsets");
    }

    #[test]
    fn pad_rejects_zero_capacity() {
        assert!(pad_to(&cloud(1, 0.0), 0, 1).is_err());
    }

    #[test]
    fn dirty_padding_is_rejected() {
        let mut points = Array2::<f32>::zeros((4, POINT_FEATURES));
        points[(2, 1)] = 0.5;
        let err = PaddedFrame::new(points, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, DataError::DirtyPadding(2)));
    }

    fn toy_dataset() -> Dataset {
        let n_max = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk_split = |name: &str, scenes: Vec<SceneInfo>, rng: &mut ChaCha8Rng| {
            let frames: usize = scenes.iter().map(|s| s.frames).sum();
            let poses = Array2::from_shape_fn((frames, JOINT_COUNT * 3), |_| {
                rng.random_range(-2.0f32..2.0)
            });
            let mask = Array2::from_shape_fn((frames, n_max), |(_, j)| u8::from(j < 4));
            let points = Array3::from_shape_fn((frames, n_max, POINT_FEATURES), |(_, j, _)| {
                if j < 4 {
                    rng.random_range(-1.0f32..1.0)
                } else {
                    0.0
                }
            });
            (
                SplitInfo { name: name.into(), scenes },
                SplitData { name: name.into(), poses, points, mask },
            )
        };
        let scene = |name: &str, preset, frames, seed| SceneInfo {
            name: name.into(),
            preset,
            frames,
            frame_period: 0.1,
            seed,
        };
        let (train_info, train) = mk_split(
            "train",
            vec![
                scene("walk-a", MotionPreset::Walk, 3, 1),
                scene("kick-a", MotionPreset::Kick, 2, 2),
            ],
            &mut rng,
        );
        let (test_info, test) =
            mk_split("test", vec![scene("walk-b", MotionPreset::Walk, 2, 3)], &mut rng);
        Dataset {
            manifest: DatasetManifest {
                format_version: DATASET_FORMAT_VERSION,
                n_max,
                concat_window: 4,
                crop_half_extent: 1.6,
                subsample_seed: 7,
                joint_count: JOINT_COUNT,
                limb_edges: crate::skeleton::LIMB_EDGES.to_vec(),
                radar: RadarConfig::default(),
                noise: NoiseModel::default(),
                splits: vec![train_info, test_info],
            },
            splits: vec![train, test],
        }
    }

    #[test]
    fn manifest_json_round_trips_floats_exactly() {
        // Guards the serde_json float_roundtrip feature: the default
        // best-effort parser reconstructs the derived wavelength one ulp off.
        let m = toy_dataset().manifest;
        let json = serde_json::to_string_pretty(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert!(
            m.radar.wavelength_m.to_bits() == back.radar.wavelength_m.to_bits(),
            "wavelength changed bits: {:?} vs {:?}",
            m.radar.wavelength_m,
            back.radar.wavelength_m
        );
        assert_eq!(m, back);
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = toy_dataset();
        write_dataset(&dataset, dir.path()).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert!(loaded.manifest == dataset.manifest, "manifest changed across round trip");
        for (a, b) in loaded.splits.iter().zip(&dataset.splits) {
            assert!(a.poses == b.poses, "poses changed in split '{}'", a.name);
            assert!(a.points == b.points, "points changed in split '{}'", a.name);
            assert!(a.mask == b.mask, "mask changed in split '{}'", a.name);
        }
        assert_eq!(loaded, dataset);
        for (a, b) in loaded.splits.iter().zip(&dataset.splits) {
            let bits_a: Vec<u32> = a.points.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.points.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }

        // Writing again over the same directory must be byte-identical.
        let before = fs::read(dir.path().join("train").join("points.f32")).unwrap();
        write_dataset(&dataset, dir.path()).unwrap();
        let after = fs::read(dir.path().join("train").join("points.f32")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn truncated_payload_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy_dataset(), dir.path()).unwrap();
        let victim = dir.path().join("test").join("points.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            DataError::SizeMismatch { path, expected, actual } => {
                assert_eq!(path, victim);
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 4);
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut dataset = toy_dataset();
        write_dataset(&dataset, dir.path()).unwrap();
        dataset.manifest.format_version = DATASET_FORMAT_VERSION + 1;
        let json = serde_json::to_string_pretty(&dataset.manifest).unwrap();
        fs::write(dir.path().join("manifest.json"), json).unwrap();
        assert!(matches!(
            read_dataset(dir.path()).unwrap_err(),
            DataError::VersionMismatch { found, .. } if found == DATASET_FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn missing_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy_dataset(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("train").join("mask.u8")).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), DataError::MissingFile(_)));
        assert!(matches!(
            read_dataset(&dir.path().join("nowhere")).unwrap_err(),
            DataError::MissingFile(_)
        ));
    }

    #[test]
    fn corrupt_mask_byte_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy_dataset(), dir.path()).unwrap();
        let victim = dir.path().join("train").join("mask.u8");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[7] = 3;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            read_dataset(dir.path()).unwrap_err(),
            DataError::BadMaskByte { frame: 1, slot: 1, value: 3 }
        ));
    }
}
