//! Frame-by-frame inference: run the coarse stage, assemble the condition
//! set (with any ablations applied), then sample and average M refinement
//! hypotheses per frame. Predictions are written as raw little-endian f32
//! coordinate files plus a JSON index describing exactly how they were made.

use super::{derive_seed, HarnessError, PoseModel, RunConfig, SplitView};
use crate::cond::ConditionSet;
use crate::dataset::Dataset;
use crate::diffusion::sample_pose;
use crate::harness::config::ScheduleConfig;
use crate::harness::model::PHASE2_PREFIXES;
use crate::harness::train::poses_from_rows;
use crate::nn::params::{ParameterStore, TapeSession};
use crate::skeleton::{Pose, PoseSequence, JOINT_COUNT};
use std::collections::BTreeMap;
use std::path::Path;

/// Seed stream tag for per-frame sampling.
const STREAM_FRAME: u64 = 0x31;

pub const PREDICTION_FORMAT_VERSION: u32 = 1;

/// Which condition producers to withhold from the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_global: bool,
    pub disable_local: bool,
    pub disable_temporal: bool,
    pub disable_structural: bool,
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }
}

/// How to run inference over one split.
#[derive(Debug, Clone)]
pub struct InferOptions {
    pub split: String,
    /// M hypotheses sampled and averaged per frame.
    pub hypotheses: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl InferOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            split: cfg.eval_split.clone(),
            hypotheses: cfg.hypotheses,
            seed: cfg.seed,
            ablation: AblationFlags::none(),
        }
    }
}

/// Sidecar describing a prediction directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub format_version: u32,
    pub split: String,
    pub frames: usize,
    pub hypotheses: usize,
    pub seed: u64,
    /// Coordinate convention of the stored poses.
    pub pose_space: String,
    pub ablation: AblationFlags,
    pub schedule: ScheduleConfig,
    /// Logical name → file name within the directory.
    pub files: BTreeMap<String, String>,
}

/// Refined and coarse poses for every frame of a split, plus the index
/// that documents them.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub refined: Vec<Pose>,
    pub coarse: Vec<Pose>,
    pub index: PredictionIndex,
}

/// Runs coarse + refinement inference over `opts.split`.
///
/// When the checkpoint carries an exponential moving average, the averaged
/// weights are the ones evaluated. Temporal history is the scene's own
/// earlier coarse estimates; the first frame of a scene uses its own coarse
/// estimate as the single history element. Poses are produced and stored
/// pelvis-relative.
pub fn infer_split(
    cfg: &RunConfig,
    dataset: &Dataset,
    store: &ParameterStore,
    opts: &InferOptions,
) -> Result<InferenceResult, HarnessError> {
    let view = SplitView::new(&dataset.manifest, &dataset.splits, &opts.split)?;
    let model = PoseModel::from_config(&cfg.conditioning)?;
    let schedule = cfg.schedule.make()?;
    if opts.hypotheses == 0 {
        return Err(HarnessError::Config("hypotheses must be positive".into()));
    }

    let snapshot;
    let eval_store: &ParameterStore = if store.has_ema() {
        snapshot = store.ema_snapshot();
        &snapshot
    } else {
        store
    };
    model.check_phase1_compatible(eval_store)?;
    for prefix in PHASE2_PREFIXES {
        if !eval_store.names().any(|n| n.starts_with(prefix)) {
            return Err(HarnessError::Config(format!(
                "checkpoint has no '{prefix}*' parameters; refinement inference needs a \
                 second-phase checkpoint"
            )));
        }
    }

    let window = cfg.conditioning.history_window;
    let mut refined = Vec::with_capacity(view.frames());
    let mut coarse_out = Vec::with_capacity(view.frames());

    for scene in 0..view.scene_count() {
        let period = view.scene_frame_period(scene);
        let mut history: Vec<Pose> = Vec::new();

        for frame in view.scene_range(scene) {
            let padded = view.padded_frame(frame)?;
            let mut sess = TapeSession::new(eval_store, false, 0);
            let out = model.coarse_forward(&mut sess, &[&padded])?;
            let coarse_pose = poses_from_rows(sess.tape.value(out.coarse_rows))?
                .pop()
                .expect("single-frame batch yields one pose");

            let c_glo = (!opts.ablation.disable_global).then_some(out.c_glo);
            let c_lim = if opts.ablation.disable_structural {
                None
            } else {
                let (_lengths, c_lim) = model.slc.forward(&mut sess, out.f_j)?;
                Some(c_lim)
            };
            let c_tem = if opts.ablation.disable_temporal {
                None
            } else {
                let tail_start = history.len().saturating_sub(window);
                let poses: Vec<Pose> = if history.is_empty() {
                    vec![coarse_pose.clone()]
                } else {
                    history[tail_start..].to_vec()
                };
                let sequence = PoseSequence::new(poses, period)?;
                let stacked = model.tmc.prepare(&[&sequence])?;
                Some(model.tmc.forward(&mut sess, &model.graph, stacked)?)
            };
            let conds = ConditionSet { c_glo, c_loc: None, c_lim, c_tem };

            // Local context re-anchors on the evolving estimate every
            // reverse step; the anchors move back to sensor space via the
            // frame's valid-point centroid.
            let centroid = out.centroids[0];
            let use_local = !opts.ablation.disable_local
                && model.frame_encodable(&padded)
                && centroid.is_some();
            let hypotheses = if use_local {
                let centroid = centroid.expect("checked above");
                let mut refresher = |sess: &mut TapeSession,
                                     joints: &[[f64; 3]; JOINT_COUNT]|
                 -> Result<Option<crate::nn::tape::TensorId>, crate::cond::CondError> {
                    let mut anchored = *joints;
                    for joint in anchored.iter_mut() {
                        for (axis, v) in joint.iter_mut().enumerate() {
                            *v += centroid[axis];
                        }
                    }
                    let anchor = Pose::new(anchored)
                        .map_err(|_| crate::cond::CondError::EmptyCloud)?;
                    let neighborhoods = model.lrc.prepare(&padded, &anchor)?;
                    Ok(Some(model.lrc.forward(sess, &[neighborhoods])?))
                };
                sample_pose(
                    &mut sess,
                    &model.denoiser,
                    &coarse_pose,
                    &conds,
                    Some(&mut refresher),
                    &schedule,
                    cfg.schedule.sampler,
                    opts.hypotheses,
                    derive_seed(opts.seed, STREAM_FRAME, frame as u64),
                )?
            } else {
                sample_pose(
                    &mut sess,
                    &model.denoiser,
                    &coarse_pose,
                    &conds,
                    None,
                    &schedule,
                    cfg.schedule.sampler,
                    opts.hypotheses,
                    derive_seed(opts.seed, STREAM_FRAME, frame as u64),
                )?
            };

            refined.push(hypotheses.mean().clone());
            history.push(coarse_pose.clone());
            coarse_out.push(coarse_pose);
        }
    }

    let index = PredictionIndex {
        format_version: PREDICTION_FORMAT_VERSION,
        split: opts.split.clone(),
        frames: view.frames(),
        hypotheses: opts.hypotheses,
        seed: opts.seed,
        pose_space: "pelvis_relative".into(),
        ablation: opts.ablation,
        schedule: cfg.schedule.clone(),
        files: BTreeMap::from([
            ("refined".into(), "refined.f32".into()),
            ("coarse".into(), "coarse.f32".into()),
        ]),
    };
    Ok(InferenceResult { refined, coarse: coarse_out, index })
}

fn write_pose_file(path: &Path, poses: &[Pose]) -> Result<(), HarnessError> {
    let mut bytes = Vec::with_capacity(poses.len() * JOINT_COUNT * 3 * 4);
    for pose in poses {
        for joint in pose.joints() {
            for &v in joint {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn read_pose_file(path: &Path, frames: usize) -> Result<Vec<Pose>, HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let expected = frames * JOINT_COUNT * 3 * 4;
    if bytes.len() != expected {
        return Err(HarnessError::Config(format!(
            "{}: expected {expected} bytes for {frames} frames, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    (0..frames)
        .map(|_| {
            let mut joints = [[0.0f64; 3]; JOINT_COUNT];
            for joint in joints.iter_mut() {
                for v in joint.iter_mut() {
                    *v = values.next().expect("length checked");
                }
            }
            Ok(Pose::new(joints)?)
        })
        .collect()
}

/// Writes `refined.f32`, `coarse.f32`, and `index.json` into `dir`.
pub fn write_predictions(dir: &Path, result: &InferenceResult) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    write_pose_file(&dir.join(&result.index.files["refined"]), &result.refined)?;
    write_pose_file(&dir.join(&result.index.files["coarse"]), &result.coarse)?;
    let index_path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&result.index)
        .map_err(|e| HarnessError::Config(format!("index serialization: {e}")))?;
    std::fs::write(&index_path, text)
        .map_err(|source| HarnessError::Io { path: index_path, source })
}

/// Loads a prediction directory written by [`write_predictions`].
pub fn read_predictions(dir: &Path) -> Result<InferenceResult, HarnessError> {
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|source| HarnessError::Io { path: index_path.clone(), source })?;
    let index: PredictionIndex = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", index_path.display())))?;
    if index.format_version != PREDICTION_FORMAT_VERSION {
        return Err(HarnessError::Config(format!(
            "prediction format {} unsupported (expected {PREDICTION_FORMAT_VERSION})",
            index.format_version
        )));
    }
    for name in ["refined", "coarse"] {
        if !index.files.contains_key(name) {
            return Err(HarnessError::Config(format!("index names no '{name}' file")));
        }
    }
    let refined = read_pose_file(&dir.join(&index.files["refined"]), index.frames)?;
    let coarse = read_pose_file(&dir.join(&index.files["coarse"]), index.frames)?;
    Ok(InferenceResult { refined, coarse, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::CondConfig;
    use crate::harness::simulate::{simulate_dataset, SimulateSpec};
    use crate::harness::train::{train_phase1, train_phase2};
    use crate::nn::params::load_checkpoint;
    use crate::radar::MotionPreset;
    use std::path::PathBuf;

    fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::desk(PathBuf::from("unused"));
        cfg.conditioning = CondConfig {
            d_joint: 8,
            d_point: 8,
            global_depth: 1,
            global_heads: 2,
            global_ffn_hidden: 8,
            local_depth: 1,
            local_heads: 2,
            local_ffn_hidden: 8,
            neighbor_count: 4,
            fps_stride: 16,
            ball_samples: 4,
            history_window: 3,
            dropout: 0.0,
            ..CondConfig::default()
        };
        cfg.epochs_phase1 = 1;
        cfg.epochs_phase2 = 1;
        cfg.batch_size = 4;
        cfg.hypotheses = 1;
        cfg.seed = 5;
        cfg
    }

    /// One trained toy checkpoint shared by the tests below.
    fn trained() -> (RunConfig, Dataset, ParameterStore) {
        let cfg = toy_config();
        let dataset =
            simulate_dataset(&SimulateSpec::new(vec![MotionPreset::Walk], 6, 4, 13)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train_phase1(&cfg, &dataset, dir.path()).unwrap();
        train_phase2(&cfg, &dataset, &dir.path().join("phase1"), dir.path()).unwrap();
        let store = load_checkpoint(&dir.path().join("phase2")).unwrap();
        (cfg, dataset, store)
    }

    #[test]
    fn inference_is_deterministic_and_round_trips_bytewise() {
        let (cfg, dataset, store) = trained();
        let opts = InferOptions::from_config(&cfg);

        let first = infer_split(&cfg, &dataset, &store, &opts).unwrap();
        assert_eq!(first.refined.len(), 4);
        assert_eq!(first.coarse.len(), 4);

        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_predictions(dir_a.path(), &first).unwrap();
        let second = infer_split(&cfg, &dataset, &store, &opts).unwrap();
        write_predictions(dir_b.path(), &second).unwrap();

        for file in ["refined.f32", "coarse.f32", "index.json"] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} must be byte-identical across reruns");
        }

        let loaded = read_predictions(dir_a.path()).unwrap();
        assert_eq!(loaded.index, first.index);
        assert_eq!(loaded.refined.len(), first.refined.len());
        // f32 storage round-trip is exact for values already written as f32.
        for (a, b) in loaded.refined.iter().zip(&first.refined) {
            for (ja, jb) in a.joints().iter().zip(b.joints()) {
                for (va, vb) in ja.iter().zip(jb) {
                    assert_eq!(*va as f32, *vb as f32);
                }
            }
        }
    }

    #[test]
    fn scene_first_frames_are_valid_and_recorded() {
        let (cfg, dataset, store) = trained();
        let mut opts = InferOptions::from_config(&cfg);
        opts.split = "train".into();
        let result = infer_split(&cfg, &dataset, &store, &opts).unwrap();
        // Pose construction rejects non-finite coordinates, so reaching here
        // means the cold-start (empty history) path produced valid poses.
        assert_eq!(result.refined.len(), 6);
        assert_eq!(result.index.pose_space, "pelvis_relative");
        assert_eq!(result.index.frames, 6);
    }

    #[test]
    fn ablations_change_output_and_are_recorded() {
        let (cfg, dataset, store) = trained();
        let opts = InferOptions::from_config(&cfg);
        let full = infer_split(&cfg, &dataset, &store, &opts).unwrap();

        let mut ablated_opts = opts.clone();
        ablated_opts.ablation = AblationFlags {
            disable_global: true,
            disable_local: true,
            disable_temporal: true,
            disable_structural: true,
        };
        let ablated = infer_split(&cfg, &dataset, &store, &ablated_opts).unwrap();
        assert_eq!(ablated.index.ablation, ablated_opts.ablation);

        let moved = full
            .refined
            .iter()
            .zip(&ablated.refined)
            .flat_map(|(a, b)| a.joints().iter().zip(b.joints()))
            .any(|(ja, jb)| ja.iter().zip(jb).any(|(va, vb)| (va - vb).abs() > 1e-9));
        assert!(moved, "removing every condition must change the samples");
        // Coarse estimates ignore the ablation flags entirely.
        for (a, b) in full.coarse.iter().zip(&ablated.coarse) {
            for (ja, jb) in a.joints().iter().zip(b.joints()) {
                for (va, vb) in ja.iter().zip(jb) {
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn refusing_a_coarse_only_checkpoint() {
        let cfg = toy_config();
        let dataset =
            simulate_dataset(&SimulateSpec::new(vec![MotionPreset::Walk], 6, 2, 13)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train_phase1(&cfg, &dataset, dir.path()).unwrap();
        let store = load_checkpoint(&dir.path().join("phase1")).unwrap();
        let err = infer_split(&cfg, &dataset, &store, &InferOptions::from_config(&cfg));
        assert!(matches!(err, Err(HarnessError::Config(_))));
    }

    #[test]
    fn prediction_files_reject_truncation() {
        let (cfg, dataset, store) = trained();
        let opts = InferOptions::from_config(&cfg);
        let result = infer_split(&cfg, &dataset, &store, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_predictions(dir.path(), &result).unwrap();

        let path = dir.path().join("refined.f32");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_predictions(dir.path()).is_err());
    }
}
