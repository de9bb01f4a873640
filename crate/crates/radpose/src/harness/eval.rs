//! Evaluation: per-frame position errors, per-scene motion smoothness, and
//! per-limb length statistics, rolled up into a serializable report plus a
//! cross-seed spread summary.

use super::{HarnessError, SplitView};
use crate::metrics::{akv, mpjpe, pa_mpjpe};
use crate::skeleton::{limb_lengths, Pose, PoseSequence, SkeletonTopology, LIMB_COUNT};
use std::path::Path;

/// Mean and standard deviation of one limb's length over a set of frames.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LimbStat {
    pub mean_m: f64,
    pub std_m: f64,
}

/// Position errors of a single frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub scene: String,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

/// Aggregates over one scene (one contiguous motion sequence).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    /// Mean squared frame-to-frame joint displacement of the predictions.
    pub akv_m2: f64,
    /// Same statistic on the ground truth, for reference.
    pub gt_akv_m2: f64,
}

/// Everything `evaluate` measures over one split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub frames: usize,
    pub scenes: Vec<SceneReport>,
    /// Frame-weighted means over all scenes.
    pub aggregate_mpjpe_mm: f64,
    pub aggregate_pa_mpjpe_mm: f64,
    pub aggregate_akv_m2: f64,
    pub aggregate_gt_akv_m2: f64,
    /// Length statistics per limb, pooled over every frame of the split.
    pub limb_stats: Vec<LimbStat>,
    /// Per-frame scores; written to `frames.csv`, not to the JSON report.
    #[serde(skip)]
    pub per_frame: Vec<FrameScore>,
}

/// Mean and sample standard deviation across evaluation seeds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedSpread {
    pub mean: f64,
    pub std: f64,
}

/// Cross-seed roll-up of the headline metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub mpjpe_mm: SeedSpread,
    pub pa_mpjpe_mm: SeedSpread,
    pub akv_m2: SeedSpread,
}

/// Scores `predictions` (pelvis-relative, one pose per frame, frame order)
/// against the split's ground truth. Position errors compare pelvis-aligned
/// poses; motion smoothness is computed per scene on the prediction sequence
/// and on the aligned ground truth for reference.
pub fn evaluate(
    view: SplitView,
    predictions: &[Pose],
    split_label: &str,
) -> Result<EvalReport, HarnessError> {
    if predictions.len() != view.frames() {
        return Err(HarnessError::FrameCountMismatch {
            predictions: predictions.len(),
            ground_truth: view.frames(),
        });
    }
    let topology = SkeletonTopology::human17();

    let mut per_frame = Vec::with_capacity(predictions.len());
    let mut scenes = Vec::with_capacity(view.scene_count());
    let mut lengths = vec![Vec::with_capacity(predictions.len()); LIMB_COUNT];

    for scene in 0..view.scene_count() {
        let range = view.scene_range(scene);
        let name = view.scene_name(scene).to_string();
        let mut mpjpe_sum = 0.0;
        let mut pa_sum = 0.0;
        let mut pred_seq = Vec::with_capacity(range.len());
        let mut gt_seq = Vec::with_capacity(range.len());

        for frame in range.clone() {
            let gt = view.gt_pose(frame)?.pelvis_aligned();
            let pred = predictions[frame].pelvis_aligned();
            let e = mpjpe(&pred, &gt);
            let pa = pa_mpjpe(&pred, &gt)?;
            mpjpe_sum += e;
            pa_sum += pa;
            per_frame.push(FrameScore {
                frame,
                scene: name.clone(),
                mpjpe_mm: e,
                pa_mpjpe_mm: pa,
            });
            for (l, &len) in limb_lengths(&pred, &topology).0.iter().enumerate() {
                lengths[l].push(len);
            }
            pred_seq.push(pred);
            gt_seq.push(gt);
        }

        let period = view.scene_frame_period(scene);
        let n = range.len() as f64;
        scenes.push(SceneReport {
            scene: name,
            frames: range.len(),
            mpjpe_mm: mpjpe_sum / n,
            pa_mpjpe_mm: pa_sum / n,
            akv_m2: akv(&PoseSequence::new(pred_seq, period)?)?,
            gt_akv_m2: akv(&PoseSequence::new(gt_seq, period)?)?,
        });
    }

    let total: usize = scenes.iter().map(|s| s.frames).sum();
    let weighted = |f: &dyn Fn(&SceneReport) -> f64| {
        scenes.iter().map(|s| f(s) * s.frames as f64).sum::<f64>() / total as f64
    };
    let limb_stats = lengths
        .iter()
        .map(|values| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            LimbStat { mean_m: mean, std_m: var.sqrt() }
        })
        .collect();

    Ok(EvalReport {
        split: split_label.to_string(),
        frames: total,
        aggregate_mpjpe_mm: weighted(&|s| s.mpjpe_mm),
        aggregate_pa_mpjpe_mm: weighted(&|s| s.pa_mpjpe_mm),
        aggregate_akv_m2: weighted(&|s| s.akv_m2),
        aggregate_gt_akv_m2: weighted(&|s| s.gt_akv_m2),
        scenes,
        limb_stats,
        per_frame,
    })
}

/// Writes `report.json` (aggregates) and `frames.csv` (per-frame scores)
/// into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| HarnessError::Config(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, text)
        .map_err(|source| HarnessError::Io { path: json_path, source })?;

    let mut csv = String::from("frame,scene,mpjpe_mm,pa_mpjpe_mm\n");
    for row in &report.per_frame {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.frame, row.scene, row.mpjpe_mm, row.pa_mpjpe_mm
        ));
    }
    let csv_path = dir.join("frames.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|source| HarnessError::Io { path: csv_path, source })
}

fn spread(values: &[f64]) -> SeedSpread {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    SeedSpread { mean, std }
}

/// Rolls several per-seed reports into mean ± sample-std headline figures.
pub fn summarize_seeds(runs: &[(u64, EvalReport)]) -> Result<SeedSummary, HarnessError> {
    if runs.is_empty() {
        return Err(HarnessError::Config("seed summary needs at least one run".into()));
    }
    let collect = |f: &dyn Fn(&EvalReport) -> f64| -> Vec<f64> {
        runs.iter().map(|(_, r)| f(r)).collect()
    };
    Ok(SeedSummary {
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        mpjpe_mm: spread(&collect(&|r| r.aggregate_mpjpe_mm)),
        pa_mpjpe_mm: spread(&collect(&|r| r.aggregate_pa_mpjpe_mm)),
        akv_m2: spread(&collect(&|r| r.aggregate_akv_m2)),
    })
}
