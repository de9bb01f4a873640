//! Typed access to one dataset split: ground-truth poses, padded point
//! frames, scene boundaries, and seeded batch schedules.

use super::HarnessError;
use crate::dataset::{DatasetManifest, PaddedFrame, SplitData, SplitInfo};
use crate::skeleton::{Pose, JOINT_COUNT};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// A split's payload plus the manifest context needed to interpret it.
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    info: &'a SplitInfo,
    data: &'a SplitData,
}

impl<'a> SplitView<'a> {
    /// Looks `name` up in both the manifest and the payload and checks the
    /// two agree on the frame count.
    pub fn new(
        manifest: &'a DatasetManifest,
        splits: &'a [SplitData],
        name: &str,
    ) -> Result<Self, HarnessError> {
        let info = manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HarnessError::SplitNotFound(name.to_string()))?;
        let data = splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HarnessError::SplitNotFound(name.to_string()))?;
        if info.frame_count() != data.poses.nrows() {
            return Err(HarnessError::Config(format!(
                "split '{name}': manifest lists {} frames but payload has {}",
                info.frame_count(),
                data.poses.nrows()
            )));
        }
        Ok(Self { info, data })
    }

    pub fn name(&self) -> &str {
        &self.info.name
    }

    pub fn frames(&self) -> usize {
        self.data.poses.nrows()
    }

    pub fn scene_count(&self) -> usize {
        self.info.scenes.len()
    }

    pub fn scene_name(&self, scene: usize) -> &str {
        &self.info.scenes[scene].name
    }

    pub fn scene_frame_period(&self, scene: usize) -> f64 {
        self.info.scenes[scene].frame_period
    }

    /// Frame range of one scene within the split's concatenated arrays.
    pub fn scene_range(&self, scene: usize) -> Range<usize> {
        let start: usize = self.info.scenes[..scene].iter().map(|s| s.frames).sum();
        start..start + self.info.scenes[scene].frames
    }

    /// Which scene a frame index belongs to.
    pub fn scene_of(&self, frame: usize) -> usize {
        let mut start = 0;
        for (i, scene) in self.info.scenes.iter().enumerate() {
            if frame < start + scene.frames {
                return i;
            }
            start += scene.frames;
        }
        panic!("frame {frame} beyond split end {}", self.frames());
    }

    /// Ground-truth pose of one frame, sensor coordinates, meters.
    pub fn gt_pose(&self, frame: usize) -> Result<Pose, HarnessError> {
        let row = self.data.poses.row(frame);
        let mut joints = [[0.0f64; 3]; JOINT_COUNT];
        for (j, joint) in joints.iter_mut().enumerate() {
            for (axis, value) in joint.iter_mut().enumerate() {
                *value = f64::from(row[j * 3 + axis]);
            }
        }
        Ok(Pose::new(joints)?)
    }

    /// Pelvis-relative ground-truth rows for a batch of frames, stacked as
    /// `(len·17, 3)` — the regression/denoising target space.
    pub fn normalized_gt_rows(&self, frames: &[usize]) -> Result<Array2<f64>, HarnessError> {
        let mut rows = Array2::<f64>::zeros((frames.len() * JOINT_COUNT, 3));
        for (slot, &frame) in frames.iter().enumerate() {
            let pose = self.gt_pose(frame)?.pelvis_aligned();
            for (j, joint) in pose.joints().iter().enumerate() {
                for (axis, &v) in joint.iter().enumerate() {
                    rows[(slot * JOINT_COUNT + j, axis)] = v;
                }
            }
        }
        Ok(rows)
    }

    /// The padded point frame at `frame`.
    pub fn padded_frame(&self, frame: usize) -> Result<PaddedFrame, HarnessError> {
        let points = self.data.points.index_axis(ndarray::Axis(0), frame).to_owned();
        let mask = self.data.mask.row(frame).iter().map(|&b| b != 0).collect();
        Ok(PaddedFrame::new(points, mask)?)
    }

    /// Indices of the up-to-`window` frames strictly before `frame` within
    /// its scene, oldest first. Empty at a scene's first frame.
    pub fn history_indices(&self, frame: usize, window: usize) -> Vec<usize> {
        let range = self.scene_range(self.scene_of(frame));
        let earliest = frame.saturating_sub(window).max(range.start);
        (earliest..frame).collect()
    }
}

/// A seeded epoch schedule: all frame indices shuffled, then chunked into
/// batches (the last one may be short).
pub fn epoch_batches(frames: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut indices: Vec<usize> = (0..frames).collect();
    indices.shuffle(rng);
    indices.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
