//! Seeded synthetic subject motion.
//!
//! A subject is a set of bone lengths plus a standing spot, drawn once per
//! seed. Frames are produced by forward kinematics from unit direction
//! vectors rotated by smooth sinusoidal joint angles, so limb lengths are
//! constant over time by construction. The `stand` preset has no time
//! dependence at all: every frame is identical.

use crate::skeleton::{Pose, PoseError, PoseSequence, JOINT_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPreset {
    Stand,
    Walk,
    RaiseHand,
    ChestExpand,
    Kick,
}

impl MotionPreset {
    pub const ALL: [MotionPreset; 5] = [
        MotionPreset::Stand,
        MotionPreset::Walk,
        MotionPreset::RaiseHand,
        MotionPreset::ChestExpand,
        MotionPreset::Kick,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MotionPreset::Stand => "stand",
            MotionPreset::Walk => "walk",
            MotionPreset::RaiseHand => "raise-hand",
            MotionPreset::ChestExpand => "chest-expand",
            MotionPreset::Kick => "kick",
        }
    }
}

impl FromStr for MotionPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stand" => Ok(MotionPreset::Stand),
            "walk" => Ok(MotionPreset::Walk),
            "raise-hand" => Ok(MotionPreset::RaiseHand),
            "chest-expand" => Ok(MotionPreset::ChestExpand),
            "kick" => Ok(MotionPreset::Kick),
            other => Err(format!(
                "unknown preset '{other}' (expected stand, walk, raise-hand, chest-expand, kick)"
            )),
        }
    }
}

/// Per-subject bone lengths (meters) and standing position, seeded once.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectShape {
    pub hip_half_width: f64,
    pub thigh: f64,
    pub shin: f64,
    pub lower_spine: f64,
    pub upper_spine: f64,
    pub neck: f64,
    pub head: f64,
    pub shoulder_half_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub stand_x: f64,
    pub stand_y: f64,
    pub stand_z: f64,
    pub gait_phase: f64,
}

impl SubjectShape {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            hip_half_width: rng.random_range(0.09..0.12),
            thigh: rng.random_range(0.40..0.47),
            shin: rng.random_range(0.37..0.44),
            lower_spine: rng.random_range(0.22..0.28),
            upper_spine: rng.random_range(0.20..0.25),
            neck: rng.random_range(0.09..0.12),
            head: rng.random_range(0.10..0.13),
            shoulder_half_width: rng.random_range(0.17..0.21),
            upper_arm: rng.random_range(0.26..0.31),
            forearm: rng.random_range(0.23..0.27),
            stand_x: rng.random_range(-0.3..0.3),
            stand_y: rng.random_range(3.0..4.0),
            stand_z: rng.random_range(-0.10..0.10),
            gait_phase: rng.random_range(0.0..TAU),
        }
    }
}

fn rot_x(a: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [v[0], v[1] * c - v[2] * s, v[1] * s + v[2] * c]
}

fn rot_y(a: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [v[0] * c + v[2] * s, v[1], -v[0] * s + v[2] * c]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scaled(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Hanging limb direction after abduction (roll, about y) then swing
/// (pitch, about x). Unit length is preserved exactly by the rotations.
fn limb_dir(pitch: f64, roll: f64) -> [f64; 3] {
    rot_x(pitch, rot_y(roll, [0.0, 0.0, -1.0]))
}

struct JointAngles {
    pelvis_offset: [f64; 3],
    torso_pitch: f64,
    thigh_pitch: [f64; 2],
    knee_flex: [f64; 2],
    arm_pitch: [f64; 2],
    arm_roll: [f64; 2],
    elbow_flex: [f64; 2],
}

/// Smooth periodic angle tracks per preset; index 0 = right, 1 = left.
fn angles_at(preset: MotionPreset, shape: &SubjectShape, time: f64) -> JointAngles {
    let mut a = JointAngles {
        pelvis_offset: [0.0; 3],
        torso_pitch: 0.0,
        thigh_pitch: [0.0; 2],
        knee_flex: [0.0; 2],
        arm_pitch: [0.0; 2],
        arm_roll: [0.0; 2],
        elbow_flex: [0.1; 2],
    };
    match preset {
        MotionPreset::Stand => {}
        MotionPreset::Walk => {
            let ph = TAU * 0.9 * time + shape.gait_phase;
            a.thigh_pitch = [0.5 * ph.sin(), 0.5 * (ph + std::f64::consts::PI).sin()];
            a.knee_flex = [
                0.35 * (1.0 - (ph - 0.6).cos()) * 0.5,
                0.35 * (1.0 - (ph + std::f64::consts::PI - 0.6).cos()) * 0.5,
            ];
            a.arm_pitch = [0.35 * (ph + std::f64::consts::PI).sin(), 0.35 * ph.sin()];
            a.elbow_flex = [0.25 + 0.1 * ph.sin(), 0.25 - 0.1 * ph.sin()];
            a.pelvis_offset = [0.015 * ph.sin(), 0.0, 0.02 * (2.0 * ph).sin()];
        }
        MotionPreset::RaiseHand => {
            let ph = TAU * 0.5 * time + shape.gait_phase;
            a.arm_roll = [1.1 + 0.8 * ph.sin(), 0.05 * ph.sin()];
            a.elbow_flex = [0.15 + 0.1 * ph.cos(), 0.12];
            a.torso_pitch = 0.01 * ph.sin();
        }
        MotionPreset::ChestExpand => {
            let ph = TAU * 0.6 * time + shape.gait_phase;
            let roll = 0.5 + 0.45 * ph.sin();
            a.arm_roll = [roll, roll];
            a.elbow_flex = [0.6 + 0.3 * ph.cos(), 0.6 + 0.3 * ph.cos()];
            a.torso_pitch = 0.04 * ph.sin();
            a.pelvis_offset = [0.0, 0.005 * ph.sin(), 0.0];
        }
        MotionPreset::Kick => {
            let ph = TAU * 0.6 * time + shape.gait_phase;
            let swing = 0.5 * (1.0 - ph.cos()); // 0..1, smooth
            a.thigh_pitch[0] = -1.0 * swing;
            a.knee_flex[0] = 1.4 * swing * (1.0 - swing);
            a.arm_pitch = [0.2 * swing, -0.2 * swing];
            a.pelvis_offset = [0.0, 0.01 * swing, -0.02 * swing];
        }
    }
    a
}

fn pose_at(preset: MotionPreset, shape: &SubjectShape, time: f64) -> Pose {
    let a = angles_at(preset, shape, time);
    let pelvis = add([shape.stand_x, shape.stand_y, shape.stand_z], a.pelvis_offset);

    let mut joints = [[0.0; 3]; JOINT_COUNT];
    joints[0] = pelvis;

    // Legs: right side index 0, left side index 1.
    for (side, (hip_idx, sign)) in [(0usize, (1usize, -1.0f64)), (1, (4, 1.0))] {
        let hip = add(pelvis, [sign * shape.hip_half_width, 0.0, 0.0]);
        let thigh_dir = limb_dir(a.thigh_pitch[side], 0.0);
        let knee = add(hip, scaled(thigh_dir, shape.thigh));
        let shin_dir = limb_dir(a.thigh_pitch[side] + a.knee_flex[side], 0.0);
        let ankle = add(knee, scaled(shin_dir, shape.shin));
        joints[hip_idx] = hip;
        joints[hip_idx + 1] = knee;
        joints[hip_idx + 2] = ankle;
    }

    // Torso column, rigidly pitched about the pelvis so breathing and sway
    // keep every segment length exact.
    let up = rot_x(a.torso_pitch, [0.0, 0.0, 1.0]);
    let spine = add(pelvis, scaled(up, shape.lower_spine));
    let thorax = add(spine, scaled(up, shape.upper_spine));
    let neck = add(thorax, scaled(up, shape.neck));
    let head = add(neck, scaled(up, shape.head));
    joints[7] = spine;
    joints[8] = thorax;
    joints[9] = neck;
    joints[10] = head;

    // Arms: left at indices 11..13, right at 14..16.
    for (side, (shoulder_idx, sign)) in [(0usize, (14usize, -1.0f64)), (1, (11, 1.0))] {
        let shoulder = add(thorax, [sign * shape.shoulder_half_width, 0.0, 0.0]);
        let upper_dir = limb_dir(a.arm_pitch[side], sign * a.arm_roll[side]);
        let elbow = add(shoulder, scaled(upper_dir, shape.upper_arm));
        let fore_dir = limb_dir(a.arm_pitch[side] + a.elbow_flex[side], sign * a.arm_roll[side]);
        let wrist = add(elbow, scaled(fore_dir, shape.forearm));
        joints[shoulder_idx] = shoulder;
        joints[shoulder_idx + 1] = elbow;
        joints[shoulder_idx + 2] = wrist;
    }

    Pose::new(joints).expect("kinematic chain yields finite coordinates")
}

/// Deterministic motion synthesis: `frames` poses at `frame_period` spacing
/// for a subject drawn from `seed`.
pub fn synth_skeleton_sequence(
    preset: MotionPreset,
    frames: usize,
    frame_period: f64,
    seed: u64,
) -> Result<PoseSequence, PoseError> {
    if frames == 0 {
        return Err(PoseError::EmptySequence);
    }
    if !(frame_period.is_finite() && frame_period > 0.0) {
        return Err(PoseError::BadFramePeriod(frame_period));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SubjectShape::sample(&mut rng);
    let poses = (0..frames)
        .map(|t| pose_at(preset, &shape, t as f64 * frame_period))
        .collect();
    PoseSequence::new(poses, frame_period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::akv;
    use crate::skeleton::{limb_lengths, SkeletonTopology};

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        for preset in MotionPreset::ALL {
            let a = synth_skeleton_sequence(preset, 20, 0.1, 42).unwrap();
            let b = synth_skeleton_sequence(preset, 20, 0.1, 42).unwrap();
            assert_eq!(a, b);
            let c = synth_skeleton_sequence(preset, 20, 0.1, 43).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn limb_lengths_constant_over_time() {
        let topo = SkeletonTopology::human17();
        for preset in MotionPreset::ALL {
            let seq = synth_skeleton_sequence(preset, 40, 0.1, 7).unwrap();
            let first = limb_lengths(&seq.frames()[0], &topo);
            for frame in seq.frames() {
                let l = limb_lengths(frame, &topo);
                for i in 0..16 {
                    assert!(
                        (l.0[i] - first.0[i]).abs() <= 1e-9,
                        "{}: limb {i} drifted",
                        preset.name()
                    );
                }
            }
        }
    }

    #[test]
    fn stand_has_exactly_zero_jitter() {
        let seq = synth_skeleton_sequence(MotionPreset::Stand, 10, 0.1, 3).unwrap();
        assert_eq!(akv(&seq).unwrap(), 0.0);
    }

    #[test]
    fn moving_presets_have_positive_jitter() {
        for preset in [
            MotionPreset::Walk,
            MotionPreset::RaiseHand,
            MotionPreset::ChestExpand,
            MotionPreset::Kick,
        ] {
            let seq = synth_skeleton_sequence(preset, 30, 0.1, 3).unwrap();
            assert!(akv(&seq).unwrap() > 1e-6, "{} should move", preset.name());
        }
    }

    #[test]
    fn subject_stays_in_plausible_volume() {
        for preset in MotionPreset::ALL {
            for seed in 0..5 {
                let seq = synth_skeleton_sequence(preset, 50, 0.1, seed).unwrap();
                for frame in seq.frames() {
                    for j in frame.joints() {
                        assert!(j[1] > 1.0 && j[1] < 6.0, "depth out of range: {j:?}");
                        assert!(j[0].abs() < 1.5 && j[2].abs() < 1.6);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_empty_or_bad_period() {
        assert!(synth_skeleton_sequence(MotionPreset::Walk, 0, 0.1, 1).is_err());
        assert!(synth_skeleton_sequence(MotionPreset::Walk, 5, 0.0, 1).is_err());
    }
}
