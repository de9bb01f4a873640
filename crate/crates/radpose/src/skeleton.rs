//! Seventeen-joint skeleton convention and pose containers.
//!
//! Joint order follows the common 17-keypoint motion-capture layout; the
//! 16 limbs form a spanning tree rooted at the pelvis (index 0). All
//! coordinates are meters in a right-handed frame.

use thiserror::Error;

pub const JOINT_COUNT: usize = 17;
pub const LIMB_COUNT: usize = 16;
pub const PELVIS: usize = 0;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

/// Parent-child joint pairs; one entry per limb.
pub const LIMB_EDGES: [(usize, usize); LIMB_COUNT] = [
    (0, 1),   // pelvis -> right hip
    (1, 2),   // right hip -> right knee
    (2, 3),   // right knee -> right ankle
    (0, 4),   // pelvis -> left hip
    (4, 5),   // left hip -> left knee
    (5, 6),   // left knee -> left ankle
    (0, 7),   // pelvis -> spine
    (7, 8),   // spine -> thorax
    (8, 9),   // thorax -> neck
    (9, 10),  // neck -> head
    (8, 11),  // thorax -> left shoulder
    (11, 12), // left shoulder -> left elbow
    (12, 13), // left elbow -> left wrist
    (8, 14),  // thorax -> right shoulder
    (14, 15), // right shoulder -> right elbow
    (15, 16), // right elbow -> right wrist
];

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("non-finite coordinate at joint {joint}")]
    NonFinite { joint: usize },
    #[error("pose sequence is empty")]
    EmptySequence,
    #[error("frame period must be positive and finite, got {0}")]
    BadFramePeriod(f64),
    #[error("need at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("degenerate target pose: all joints coincide")]
    DegenerateTarget,
    #[error("edge list is not a spanning tree over {JOINT_COUNT} joints rooted at the pelvis")]
    BadTopology,
}

/// Skeleton wiring: joint names plus the limb edge list.
///
/// The constructor rejects edge lists that do not form a spanning tree over
/// all joints reachable from the pelvis.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    edges: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    pub fn human17() -> Self {
        Self::new(LIMB_EDGES.to_vec()).expect("built-in topology is valid")
    }

    pub fn new(edges: Vec<(usize, usize)>) -> Result<Self, PoseError> {
        if edges.len() != LIMB_COUNT {
            return Err(PoseError::BadTopology);
        }
        let mut seen = [false; JOINT_COUNT];
        seen[PELVIS] = true;
        let mut frontier = vec![PELVIS];
        // Tree check: 16 edges + full reachability from the root implies no cycle.
        while let Some(j) = frontier.pop() {
            for &(a, b) in &edges {
                if a >= JOINT_COUNT || b >= JOINT_COUNT {
                    return Err(PoseError::BadTopology);
                }
                let other = if a == j { b } else if b == j { a } else { continue };
                if !seen[other] {
                    seen[other] = true;
                    frontier.push(other);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(Self { edges })
        } else {
            Err(PoseError::BadTopology)
        }
    }

    pub fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// "parent_joint-child_joint" labels, index-aligned with limb lengths.
    pub fn limb_names(&self) -> Vec<String> {
        self.edges
            .iter()
            .map(|&(a, b)| format!("{}-{}", JOINT_NAMES[a], JOINT_NAMES[b]))
            .collect()
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::human17()
    }
}

/// One 17-joint pose. `normalized` marks pelvis-relative coordinates,
/// in which case joint 0 is exactly the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    joints: [[f64; 3]; JOINT_COUNT],
    normalized: bool,
}

impl Pose {
    pub fn new(joints: [[f64; 3]; JOINT_COUNT]) -> Result<Self, PoseError> {
        for (j, p) in joints.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(PoseError::NonFinite { joint: j });
            }
        }
        Ok(Self { joints, normalized: false })
    }

    pub fn joints(&self) -> &[[f64; 3]; JOINT_COUNT] {
        &self.joints
    }

    pub fn joint(&self, index: usize) -> [f64; 3] {
        self.joints[index]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Pelvis-relative copy: subtracts joint 0 from every joint. Idempotent
    /// bit-for-bit (subtracting an exact zero pelvis changes nothing).
    pub fn pelvis_aligned(&self) -> Pose {
        let p = self.joints[PELVIS];
        let mut joints = self.joints;
        for joint in joints.iter_mut() {
            *joint = [joint[0] - p[0], joint[1] - p[1], joint[2] - p[2]];
        }
        Pose { joints, normalized: true }
    }

    /// Uniformly translated copy; clears the normalized flag.
    pub fn translated(&self, offset: [f64; 3]) -> Pose {
        let mut joints = self.joints;
        for joint in joints.iter_mut() {
            *joint = [joint[0] + offset[0], joint[1] + offset[1], joint[2] + offset[2]];
        }
        Pose { joints, normalized: false }
    }

    pub fn flat(&self) -> [f64; JOINT_COUNT * 3] {
        let mut out = [0.0; JOINT_COUNT * 3];
        for (j, p) in self.joints.iter().enumerate() {
            out[j * 3..j * 3 + 3].copy_from_slice(p);
        }
        out
    }
}

/// Per-limb Euclidean lengths in meters, aligned with the topology edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbLengths(pub [f64; LIMB_COUNT]);

/// Lengths of all limbs of `pose` under `topology`.
pub fn limb_lengths(pose: &Pose, topology: &SkeletonTopology) -> LimbLengths {
    let mut out = [0.0; LIMB_COUNT];
    for (i, &(a, b)) in topology.edges().iter().enumerate() {
        let pa = pose.joint(a);
        let pb = pose.joint(b);
        out[i] = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
    }
    LimbLengths(out)
}

/// Fixed-rate pose sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<Pose>,
    frame_period: f64,
}

impl PoseSequence {
    pub fn new(frames: Vec<Pose>, frame_period: f64) -> Result<Self, PoseError> {
        if frames.is_empty() {
            return Err(PoseError::EmptySequence);
        }
        if !(frame_period.is_finite() && frame_period > 0.0) {
            return Err(PoseError::BadFramePeriod(frame_period));
        }
        Ok(Self { frames, frame_period })
    }

    pub fn frames(&self) -> &[Pose] {
        &self.frames
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
