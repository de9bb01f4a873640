//! Two-phase training. Phase one fits the coarse stage (point encoder,
//! global context, pose decoder) with a joint-coordinate regression loss.
//! Phase two freezes that stage and fits the refinement stack (denoiser plus
//! the local / structural / temporal condition producers) with the noise
//! prediction objective and an L1 limb-length term, tracking an exponential
//! moving average of the refinement weights.

use super::{derive_seed, Adam, HarnessError, PoseModel, RunConfig, SplitView};
use crate::cond::ConditionSet;
use crate::dataset::{Dataset, PaddedFrame};
use crate::diffusion::{diffusion_loss, draw_training_noise};
use crate::harness::data::epoch_batches;
use crate::harness::model::{PHASE1_PREFIXES, PHASE2_PREFIXES};
use crate::nn::params::{load_checkpoint, save_checkpoint, ParameterStore, TapeSession};
use crate::skeleton::{limb_lengths, Pose, PoseSequence, SkeletonTopology, JOINT_COUNT, LIMB_COUNT, PELVIS};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Seed-stream tags, one per independent randomness consumer.
const STREAM_P1_SHUFFLE: u64 = 0x11;
const STREAM_P1_DROPOUT: u64 = 0x12;
const STREAM_P2_INIT: u64 = 0x21;
const STREAM_P2_SHUFFLE: u64 = 0x22;
const STREAM_P2_DROPOUT: u64 = 0x23;
const STREAM_P2_NOISE: u64 = 0x24;

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Item-weighted mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Directory holding `manifest.json` + `params.f32`.
    pub checkpoint_dir: PathBuf,
    /// CSV with one `epoch,loss` row per epoch.
    pub loss_csv: PathBuf,
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<(), HarnessError> {
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    std::fs::write(path, text)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Interprets a `(count·17, 3)` coordinate block as `count` poses.
pub(crate) fn poses_from_rows(rows: &Array2<f64>) -> Result<Vec<Pose>, HarnessError> {
    if rows.nrows() % JOINT_COUNT != 0 || rows.ncols() != 3 {
        return Err(HarnessError::Config(format!(
            "pose block must be (n·{JOINT_COUNT})x3, got {:?}",
            rows.shape()
        )));
    }
    (0..rows.nrows() / JOINT_COUNT)
        .map(|i| {
            let mut joints = [[0.0f64; 3]; JOINT_COUNT];
            for (j, joint) in joints.iter_mut().enumerate() {
                for (axis, v) in joint.iter_mut().enumerate() {
                    *v = rows[(i * JOINT_COUNT + j, axis)];
                }
            }
            Ok(Pose::new(joints)?)
        })
        .collect()
}

fn load_padded(view: SplitView, frames: &[usize]) -> Result<Vec<PaddedFrame>, HarnessError> {
    frames.iter().map(|&f| view.padded_frame(f)).collect()
}

/// Trains the coarse stage from scratch on the configured train split and
/// writes the checkpoint to `out_dir/phase1`.
pub fn train_phase1(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainReport, HarnessError> {
    cfg.validate_shape()?;
    let view = SplitView::new(&dataset.manifest, &dataset.splits, &cfg.train_split)?;
    let model = PoseModel::from_config(&cfg.conditioning)?;

    let mut store = ParameterStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.init_phase1(&mut store, &mut init_rng)?;
    let mut adam = Adam::new(cfg.optimizer.clone());

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_phase1);
    for epoch in 0..cfg.epochs_phase1 {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_P1_SHUFFLE, epoch as u64));
        let batches = epoch_batches(view.frames(), cfg.batch_size, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut item_count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let padded = load_padded(view, batch)?;
            let refs: Vec<&PaddedFrame> = padded.iter().collect();
            let targets = view.normalized_gt_rows(batch)?;

            let grads = {
                let mut sess = TapeSession::new(
                    &store,
                    true,
                    derive_seed(cfg.seed, STREAM_P1_DROPOUT, pack(epoch, bi)),
                );
                let out = model.coarse_forward(&mut sess, &refs)?;
                let target = sess.tape.constant(targets);
                let residual = sess.tape.sub(out.coarse_rows, target);
                let squared = sess.tape.mul_elem(residual, residual);
                let loss = sess.tape.mean_all(squared);
                loss_sum += sess.tape.value(loss)[(0, 0)] * batch.len() as f64;
                item_count += batch.len();
                sess.gradients(loss)
            };
            adam.step(&mut store, &grads)?;
        }
        epoch_losses.push(loss_sum / item_count as f64);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|source| HarnessError::Io { path: out_dir.to_path_buf(), source })?;
    let checkpoint_dir = out_dir.join("phase1");
    save_checkpoint(&store, &checkpoint_dir)?;
    let loss_csv = out_dir.join("phase1_loss.csv");
    write_loss_csv(&loss_csv, &epoch_losses)?;
    Ok(TrainReport { epoch_losses, checkpoint_dir, loss_csv })
}

/// Runs the coarse stage in evaluation mode over every frame of `view`,
/// in frame order, returning one pelvis-relative pose per frame.
pub fn coarse_inference(
    model: &PoseModel,
    store: &ParameterStore,
    view: SplitView,
    batch_size: usize,
) -> Result<Vec<Pose>, HarnessError> {
    let indices: Vec<usize> = (0..view.frames()).collect();
    let mut poses = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let padded = load_padded(view, chunk)?;
        let refs: Vec<&PaddedFrame> = padded.iter().collect();
        let mut sess = TapeSession::new(store, false, 0);
        let out = model.coarse_forward(&mut sess, &refs)?;
        poses.extend(poses_from_rows(sess.tape.value(out.coarse_rows))?);
    }
    Ok(poses)
}

/// The per-frame motion history fed to the temporal producer: the coarse
/// estimates of up to `window` frames strictly before `frame` within the
/// same scene, or the frame's own coarse estimate at a scene start.
fn history_sequence(
    view: SplitView,
    coarse: &[Pose],
    frame: usize,
    window: usize,
) -> Result<PoseSequence, HarnessError> {
    let indices = view.history_indices(frame, window);
    let poses: Vec<Pose> = if indices.is_empty() {
        vec![coarse[frame].clone()]
    } else {
        indices.iter().map(|&i| coarse[i].clone()).collect()
    };
    let period = view.scene_frame_period(view.scene_of(frame));
    Ok(PoseSequence::new(poses, period)?)
}

/// Trains the refinement stack on top of a frozen coarse-stage checkpoint
/// and writes the combined checkpoint (refinement EMA included) to
/// `out_dir/phase2`.
pub fn train_phase2(
    cfg: &RunConfig,
    dataset: &Dataset,
    phase1_dir: &Path,
    out_dir: &Path,
) -> Result<TrainReport, HarnessError> {
    cfg.validate_shape()?;
    let view = SplitView::new(&dataset.manifest, &dataset.splits, &cfg.train_split)?;
    let model = PoseModel::from_config(&cfg.conditioning)?;
    let schedule = cfg.schedule.make()?;
    let topology = SkeletonTopology::human17();

    let mut store = load_checkpoint(phase1_dir)?;
    model.check_phase1_compatible(&store)?;
    for prefix in PHASE1_PREFIXES {
        store.freeze_prefix(prefix);
    }
    let mut init_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_P2_INIT, 0));
    model.init_phase2(&mut store, &mut init_rng)?;
    for prefix in PHASE2_PREFIXES {
        store.ema_init(prefix);
    }
    let mut adam = Adam::new(cfg.optimizer.clone());

    // The temporal producer consumes coarse estimates, never ground truth,
    // so train and inference see the same kind of history. The coarse stage
    // is frozen, so one pass up front serves every epoch.
    let coarse = coarse_inference(&model, &store, view, cfg.batch_size)?;

    // Frames too sparse for the point encoder have no local neighborhoods
    // to refine against; the refinement stack trains on the rest.
    let usable: Vec<usize> = (0..view.frames())
        .map(|f| view.padded_frame(f).map(|p| (f, model.frame_encodable(&p))))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter_map(|(f, ok)| ok.then_some(f))
        .collect();
    if usable.is_empty() {
        return Err(HarnessError::Config(format!(
            "split '{}' has no frame with enough valid points to train the refinement stack",
            view.name()
        )));
    }

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_phase2);
    for epoch in 0..cfg.epochs_phase2 {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_P2_SHUFFLE, epoch as u64));
        let batches = epoch_batches(usable.len(), cfg.batch_size, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut item_count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let frames: Vec<usize> = batch.iter().map(|&slot| usable[slot]).collect();
            let padded = load_padded(view, &frames)?;
            let refs: Vec<&PaddedFrame> = padded.iter().collect();

            // Frozen coarse features, computed dropout-free and re-entered
            // into the training session as constants.
            let (f_j_value, c_glo_value) = {
                let mut frozen = TapeSession::new(&store, false, 0);
                let out = model.coarse_forward(&mut frozen, &refs)?;
                (
                    frozen.tape.value(out.f_j).clone(),
                    frozen.tape.value(out.c_glo).clone(),
                )
            };

            let h0 = view.normalized_gt_rows(&frames)?;
            let mut limb_targets = Array2::<f64>::zeros((frames.len(), LIMB_COUNT));
            for (b, &frame) in frames.iter().enumerate() {
                let gt = view.gt_pose(frame)?;
                for (l, &len) in limb_lengths(&gt, &topology).0.iter().enumerate() {
                    limb_targets[(b, l)] = len;
                }
            }

            // The corruption the loss will apply is previewed on a clone of
            // its generator (the draw order is documented as replayable), so
            // local neighborhoods can be anchored at exactly the noisy poses
            // the denoiser will see. Anchors live in sensor space: noisy
            // normalized joints plus the ground-truth pelvis position.
            let mut loss_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_P2_NOISE, pack(epoch, bi)));
            let mut preview_rng = loss_rng.clone();
            let (ks, eps) = draw_training_noise(&mut preview_rng, frames.len(), schedule.steps());
            let mut neighborhoods = Vec::with_capacity(frames.len());
            for (b, &frame) in frames.iter().enumerate() {
                let pelvis = view.gt_pose(frame)?.joint(PELVIS);
                let g = schedule.gamma(ks[b]);
                let (signal, noise) = (g.sqrt(), (1.0 - g).sqrt());
                let mut joints = [[0.0f64; 3]; JOINT_COUNT];
                for (j, joint) in joints.iter_mut().enumerate() {
                    let r = b * JOINT_COUNT + j;
                    for (axis, v) in joint.iter_mut().enumerate() {
                        *v = signal * h0[(r, axis)] + noise * eps[(r, axis)] + pelvis[axis];
                    }
                }
                neighborhoods.push(model.lrc.prepare(&padded[b], &Pose::new(joints)?)?);
            }

            let histories: Vec<PoseSequence> = frames
                .iter()
                .map(|&f| history_sequence(view, &coarse, f, cfg.conditioning.history_window))
                .collect::<Result<_, _>>()?;
            let history_refs: Vec<&PoseSequence> = histories.iter().collect();
            let stacked = model.tmc.prepare(&history_refs)?;

            let grads = {
                let mut sess = TapeSession::new(
                    &store,
                    true,
                    derive_seed(cfg.seed, STREAM_P2_DROPOUT, pack(epoch, bi)),
                );
                let f_j = sess.tape.constant(f_j_value);
                let c_glo = sess.tape.constant(c_glo_value);
                let (lengths, c_lim) = model.slc.forward(&mut sess, f_j)?;
                let c_loc = model.lrc.forward(&mut sess, &neighborhoods)?;
                let c_tem = model.tmc.forward(&mut sess, &model.graph, stacked)?;
                let conds = ConditionSet {
                    c_glo: Some(c_glo),
                    c_loc: Some(c_loc),
                    c_lim: Some(c_lim),
                    c_tem: Some(c_tem),
                };
                let loss = diffusion_loss(
                    &mut sess,
                    &model.denoiser,
                    &schedule,
                    &h0,
                    &conds,
                    Some(lengths),
                    Some(&limb_targets),
                    cfg.limb_loss_weight,
                    &mut loss_rng,
                )?;
                loss_sum += sess.tape.value(loss)[(0, 0)] * frames.len() as f64;
                item_count += frames.len();
                sess.gradients(loss)
            };
            adam.step(&mut store, &grads)?;
            store.ema_update(cfg.ema_decay);
        }
        epoch_losses.push(loss_sum / item_count as f64);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|source| HarnessError::Io { path: out_dir.to_path_buf(), source })?;
    let checkpoint_dir = out_dir.join("phase2");
    save_checkpoint(&store, &checkpoint_dir)?;
    let loss_csv = out_dir.join("phase2_loss.csv");
    write_loss_csv(&loss_csv, &epoch_losses)?;
    Ok(TrainReport { epoch_losses, checkpoint_dir, loss_csv })
}

/// Packs an (epoch, batch) pair into one seed-stream index.
fn pack(epoch: usize, batch: usize) -> u64 {
    ((epoch as u64) << 32) | batch as u64
}
