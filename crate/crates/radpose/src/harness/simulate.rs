//! Dataset production: synthesize a skeleton sequence per motion preset,
//! render each frame to a radar point cloud, then run the window-concat →
//! pelvis-crop → pad preprocessing into the on-disk dataset layout.

use super::{derive_seed, HarnessError};
use crate::dataset::{
    concat_frames, crop_region, pad_to, write_dataset, Dataset, DatasetManifest, SceneInfo,
    SplitData, SplitInfo,
};
use crate::radar::{
    render_pointcloud, synth_skeleton_sequence, MotionPreset, NoiseModel, PointCloudFrame,
    RadarConfig,
};
use crate::skeleton::{SkeletonTopology, JOINT_COUNT, LIMB_EDGES, PELVIS};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Seed-stream tags for scene synthesis and per-frame rendering.
const STREAM_SCENE: u64 = 0x51;
const STREAM_RENDER: u64 = 0x52;

/// What to simulate and how to preprocess it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    /// One scene per preset and split.
    pub presets: Vec<MotionPreset>,
    /// Frames per preset in the train split.
    pub train_frames: usize,
    /// Frames per preset in the test split; 0 writes no test split.
    pub test_frames: usize,
    pub frame_period: f64,
    pub seed: u64,
    pub radar: RadarConfig,
    pub noise: NoiseModel,
    /// Padded point capacity per frame.
    pub n_max: usize,
    /// How many recent rendered frames are unioned per sample.
    pub concat_window: usize,
    /// Half side length of the cube kept around the ground-truth pelvis.
    pub crop_half_extent: f64,
}

impl SimulateSpec {
    /// Desk defaults: 256-point frames built from 4-frame windows cropped
    /// at ±1.6 m.
    pub fn new(presets: Vec<MotionPreset>, train_frames: usize, test_frames: usize, seed: u64) -> Self {
        Self {
            presets,
            train_frames,
            test_frames,
            frame_period: 0.1,
            seed,
            radar: RadarConfig::default(),
            noise: NoiseModel::default(),
            n_max: 256,
            concat_window: 4,
            crop_half_extent: 1.6,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.presets.is_empty() {
            return Err(HarnessError::Config("at least one motion preset is required".into()));
        }
        if self.train_frames == 0 {
            return Err(HarnessError::Config("train_frames must be positive".into()));
        }
        if !(self.frame_period.is_finite() && self.frame_period > 0.0) {
            return Err(HarnessError::Config(format!(
                "frame_period must be positive, got {}",
                self.frame_period
            )));
        }
        if self.n_max == 0 || self.concat_window == 0 {
            return Err(HarnessError::Config("n_max and concat_window must be positive".into()));
        }
        if !(self.crop_half_extent.is_finite() && self.crop_half_extent > 0.0) {
            return Err(HarnessError::Config(format!(
                "crop_half_extent must be positive, got {}",
                self.crop_half_extent
            )));
        }
        self.radar.validate()?;
        self.noise.validate()?;
        Ok(())
    }
}

/// Builds the dataset in memory: for each split and preset, synthesize the
/// pose sequence, render every frame, and preprocess frame windows into
/// fixed-size padded tensors alongside the ground-truth joints.
pub fn simulate_dataset(spec: &SimulateSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let topology = SkeletonTopology::human17();

    let mut split_infos = Vec::new();
    let mut splits = Vec::new();
    let split_plans: Vec<(&str, usize)> = [("train", spec.train_frames), ("test", spec.test_frames)]
        .into_iter()
        .filter(|&(_, frames)| frames > 0)
        .collect();

    for (split_index, (split_name, frames_per_scene)) in split_plans.iter().enumerate() {
        let total = frames_per_scene * spec.presets.len();
        let mut poses = Array2::<f32>::zeros((total, JOINT_COUNT * 3));
        let mut points = Array3::<f32>::zeros((total, spec.n_max, 6));
        let mut mask = Array2::<u8>::zeros((total, spec.n_max));
        let mut scenes = Vec::new();
        let mut row = 0usize;

        for (preset_index, &preset) in spec.presets.iter().enumerate() {
            let scene_seed = derive_seed(
                spec.seed,
                STREAM_SCENE,
                (split_index as u64) << 32 | preset_index as u64,
            );
            let sequence =
                synth_skeleton_sequence(preset, *frames_per_scene, spec.frame_period, scene_seed)?;

            let mut rendered: Vec<PointCloudFrame> = Vec::with_capacity(*frames_per_scene);
            for (t, pose) in sequence.frames().iter().enumerate() {
                let prev = (t > 0).then(|| &sequence.frames()[t - 1]);
                let frame_seed = derive_seed(scene_seed, STREAM_RENDER, t as u64);
                rendered.push(render_pointcloud(
                    pose,
                    prev,
                    spec.frame_period,
                    t as f64 * spec.frame_period,
                    &spec.radar,
                    &spec.noise,
                    &topology,
                    frame_seed,
                )?);
            }

            for (t, pose) in sequence.frames().iter().enumerate() {
                let merged = concat_frames(&rendered[..=t], spec.concat_window)?;
                let cropped = crop_region(&merged, pose.joint(PELVIS), spec.crop_half_extent)?;
                let padded = pad_to(&cropped, spec.n_max, spec.seed.wrapping_add(row as u64))?;

                for (j, joint) in pose.joints().iter().enumerate() {
                    for (axis, &v) in joint.iter().enumerate() {
                        poses[(row, j * 3 + axis)] = v as f32;
                    }
                }
                points
                    .index_axis_mut(ndarray::Axis(0), row)
                    .assign(padded.points());
                for (slot, &keep) in padded.valid_mask().iter().enumerate() {
                    mask[(row, slot)] = u8::from(keep);
                }
                row += 1;
            }

            scenes.push(SceneInfo {
                name: format!("{split_name}-{}", preset.name()),
                preset,
                frames: *frames_per_scene,
                frame_period: spec.frame_period,
                seed: scene_seed,
            });
        }

        split_infos.push(SplitInfo { name: (*split_name).to_string(), scenes });
        splits.push(SplitData { name: (*split_name).to_string(), poses, points, mask });
    }

    let manifest = DatasetManifest {
        format_version: crate::dataset::DATASET_FORMAT_VERSION,
        n_max: spec.n_max,
        concat_window: spec.concat_window,
        crop_half_extent: spec.crop_half_extent,
        subsample_seed: spec.seed,
        joint_count: JOINT_COUNT,
        limb_edges: LIMB_EDGES.to_vec(),
        radar: spec.radar.clone(),
        noise: spec.noise.clone(),
        splits: split_infos,
    };
    Ok(Dataset { manifest, splits })
}

/// Simulates and writes the dataset directory, returning its manifest.
pub fn simulate_to_dir(spec: &SimulateSpec, dir: &Path) -> Result<DatasetManifest, HarnessError> {
    let dataset = simulate_dataset(spec)?;
    write_dataset(&dataset, dir)?;
    Ok(dataset.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::read_dataset;
    use crate::harness::SplitView;

    fn small_spec() -> SimulateSpec {
        SimulateSpec::new(vec![MotionPreset::Walk, MotionPreset::Kick], 12, 5, 3)
    }

    #[test]
    fn dataset_shape_matches_the_plan() {
        let dataset = simulate_dataset(&small_spec()).unwrap();
        assert_eq!(dataset.splits.len(), 2);
        let train = dataset.split("train").unwrap();
        assert_eq!(train.poses.nrows(), 24);
        assert_eq!(train.points.shape(), &[24, 256, 6]);
        let test = dataset.split("test").unwrap();
        assert_eq!(test.poses.nrows(), 10);
        assert_eq!(dataset.manifest.splits[0].scenes.len(), 2);
        assert_eq!(dataset.manifest.splits[0].scenes[0].name, "train-walk");
        assert_eq!(dataset.manifest.splits[1].scenes[1].name, "test-kick");

        // Typical frames carry a healthy number of valid points.
        let view = SplitView::new(&dataset.manifest, &dataset.splits, "train").unwrap();
        let mean_valid: f64 = (0..view.frames())
            .map(|i| view.padded_frame(i).unwrap().n_valid() as f64)
            .sum::<f64>()
            / view.frames() as f64;
        assert!(mean_valid > 32.0, "suspiciously sparse clouds: mean {mean_valid}");
    }

    #[test]
    fn zero_test_frames_writes_a_single_split() {
        let mut spec = small_spec();
        spec.test_frames = 0;
        let dataset = simulate_dataset(&spec).unwrap();
        assert_eq!(dataset.splits.len(), 1);
        assert!(dataset.split("test").is_none());
    }

    #[test]
    fn simulation_is_deterministic_and_round_trips_through_disk() {
        let spec = small_spec();
        let first = simulate_dataset(&spec).unwrap();
        let second = simulate_dataset(&spec).unwrap();
        assert_eq!(first, second);

        let dir = tempfile::tempdir().unwrap();
        simulate_to_dir(&spec, dir.path()).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded, first);
    }

    #[test]
    fn different_seeds_produce_different_clouds() {
        let a = simulate_dataset(&small_spec()).unwrap();
        let mut spec = small_spec();
        spec.seed = 4;
        let b = simulate_dataset(&spec).unwrap();
        assert_ne!(a.split("train").unwrap().points, b.split("train").unwrap().points);
    }

    #[test]
    fn cropped_points_stay_near_the_ground_truth_pelvis() {
        let dataset = simulate_dataset(&small_spec()).unwrap();
        let view = SplitView::new(&dataset.manifest, &dataset.splits, "train").unwrap();
        for frame in 0..view.frames() {
            let pelvis = view.gt_pose(frame).unwrap().joint(PELVIS);
            let padded = view.padded_frame(frame).unwrap();
            for (slot, &keep) in padded.valid_mask().iter().enumerate() {
                if keep {
                    for axis in 0..3 {
                        let d = (f64::from(padded.points()[(slot, axis)]) - pelvis[axis]).abs();
                        // f32 storage of both sides costs a few ulps at most.
                        assert!(d <= 1.6 + 1e-5, "frame {frame} slot {slot} axis {axis}: {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.presets.clear();
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.train_frames = 0;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.crop_half_extent = 0.0;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.noise.segment_dropout_prob = 1.5;
        assert!(spec.validate().is_err());
    }
}
