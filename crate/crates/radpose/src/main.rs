//! Command-line front end: simulate datasets, train the two stages, run
//! refinement inference, evaluate predictions, and inspect artifacts.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or runtime errors.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use radpose::cond::GrcProbe;
use radpose::dataset::{read_dataset, Dataset};
use radpose::harness::{
    evaluate, infer_split, read_predictions, simulate_to_dir, summarize_seeds, train_phase1,
    train_phase2, write_predictions, write_report, AblationFlags, EvalReport, HarnessError,
    InferOptions, PoseModel, RunConfig, RunRecord, SimulateSpec, SplitView,
};
use radpose::nn::params::{load_checkpoint, TapeSession};
use radpose::radar::{MotionPreset, NoiseModel};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "radpose",
    version,
    about = "Synthetic mmWave radar pose pipeline: simulate, train, infer, evaluate, inspect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic motion scenes to a preprocessed dataset directory
    Simulate(SimulateArgs),
    /// Train the coarse stage (phase 1) or the refinement stack (phase 2)
    Train(TrainArgs),
    /// Refine poses over one split and write a prediction directory
    Infer(InferArgs),
    /// Score prediction directories, or run a multi-seed evaluation
    Eval(EvalArgs),
    /// Summarize datasets and checkpoints, or dump attention maps
    Inspect(InspectArgs),
}

fn parse_preset(s: &str) -> Result<MotionPreset, String> {
    s.parse()
}

#[derive(Args)]
struct SimulateArgs {
    /// Motion preset (stand, walk, raise-hand, chest-expand, kick); repeat
    /// for one scene per preset
    #[arg(long = "preset", value_parser = parse_preset, required = true)]
    presets: Vec<MotionPreset>,
    /// Frames per preset in the train split
    #[arg(long, default_value_t = 500)]
    frames: usize,
    /// Frames per preset in the test split (0 = no test split)
    #[arg(long, default_value_t = 0)]
    test_frames: usize,
    /// Seconds between frames
    #[arg(long, default_value_t = 0.1)]
    frame_period: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Padded point capacity per frame
    #[arg(long, default_value_t = 256)]
    n_max: usize,
    /// Recent frames unioned per sample
    #[arg(long, default_value_t = 4)]
    concat_window: usize,
    /// Half side length (m) of the crop cube around the pelvis
    #[arg(long, default_value_t = 1.6)]
    crop_half_extent: f64,
    /// Disable all measurement noise
    #[arg(long, conflicts_with_all = ["dispersion_sigma", "segment_dropout_prob", "ghost_rate"])]
    no_noise: bool,
    /// Override the reflection dispersion (m)
    #[arg(long)]
    dispersion_sigma: Option<f64>,
    /// Override the per-limb dropout probability
    #[arg(long)]
    segment_dropout_prob: Option<f64>,
    /// Override the ghost-point rate per frame
    #[arg(long)]
    ghost_rate: Option<f64>,
    /// Override the reflection points sampled per limb
    #[arg(long)]
    points_per_limb: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Which stage to train
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    /// Run configuration (JSON; partial documents complete from the profile)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, loss curves, and run.json
    #[arg(long)]
    out: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Coarse-stage checkpoint consumed by phase 2 (default: OUT/phase1)
    #[arg(long)]
    phase1: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory (phase-2; its EMA weights are used when present)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output prediction directory
    #[arg(long)]
    out: PathBuf,
    /// Split to refine (default: the configured eval split)
    #[arg(long)]
    split: Option<String>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured hypothesis count M
    #[arg(long)]
    hypotheses: Option<usize>,
    /// Withhold the global context condition
    #[arg(long)]
    disable_global: bool,
    /// Withhold the local context condition
    #[arg(long)]
    disable_local: bool,
    /// Withhold the temporal motion condition
    #[arg(long)]
    disable_temporal: bool,
    /// Withhold the structural limb-length condition
    #[arg(long)]
    disable_structural: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports and run.json
    #[arg(long)]
    out: PathBuf,
    /// Split providing the ground truth (default: each index's own split,
    /// or the configured eval split in --checkpoint mode)
    #[arg(long)]
    split: Option<String>,
    /// Prediction directory to score; repeatable
    #[arg(long = "predictions")]
    predictions: Vec<PathBuf>,
    /// Run inference + evaluation per seed from this checkpoint instead
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Seeds for --checkpoint mode (default: the configured eval seeds)
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct InspectArgs {
    /// Dataset directory to summarize
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory to summarize
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dump global-stack attention maps for one frame (needs --config,
    /// --checkpoint, --dataset, --frame, --out)
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame index within the split
    #[arg(long)]
    frame: Option<usize>,
    /// Split the frame index refers to (default: the configured eval split)
    #[arg(long)]
    split: Option<String>,
    /// Output directory for the attention dump
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Run(HarnessError),
}

macro_rules! run_error_from {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Run(e.into())
            }
        }
    )+};
}
run_error_from!(
    HarnessError,
    radpose::dataset::DataError,
    radpose::nn::params::CheckpointError,
    radpose::cond::CondError
);

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Run(err)) => {
            eprintln!("error: {err}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::Inspect(args) => run_inspect(args),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_dataset_for(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(read_dataset(&cfg.dataset)?)
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut spec = SimulateSpec::new(args.presets, args.frames, args.test_frames, args.seed);
    spec.frame_period = args.frame_period;
    spec.n_max = args.n_max;
    spec.concat_window = args.concat_window;
    spec.crop_half_extent = args.crop_half_extent;
    if args.no_noise {
        spec.noise = NoiseModel::none();
    }
    if let Some(v) = args.dispersion_sigma {
        spec.noise.dispersion_sigma = v;
    }
    if let Some(v) = args.segment_dropout_prob {
        spec.noise.segment_dropout_prob = v;
    }
    if let Some(v) = args.ghost_rate {
        spec.noise.ghost_rate = v;
    }
    if let Some(v) = args.points_per_limb {
        spec.noise.points_per_limb = v;
    }

    let manifest = simulate_to_dir(&spec, &args.out)?;
    let mut record = RunRecord::new("simulate", args.seed, &spec);
    record.record_output("manifest.json");
    for split in &manifest.splits {
        for file in ["poses.f32", "points.f32", "mask.u8"] {
            record.record_output(format!("{}/{file}", split.name));
        }
    }
    record.write(&args.out)?;

    for split in &manifest.splits {
        let frames: usize = split.scenes.iter().map(|s| s.frames).sum();
        println!(
            "split '{}': {} scenes, {frames} frames → {}",
            split.name,
            split.scenes.len(),
            args.out.join(&split.name).display()
        );
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let dataset = read_dataset_for(&cfg)?;

    let mut record = RunRecord::new(format!("train --phase {}", args.phase), cfg.seed, &cfg);
    record.record_input(&args.config)?;
    record.record_input(&cfg.dataset)?;

    let report = match args.phase {
        1 => train_phase1(&cfg, &dataset, &args.out)?,
        2 => {
            let phase1_dir = args.phase1.clone().unwrap_or_else(|| args.out.join("phase1"));
            record.record_input(&phase1_dir)?;
            train_phase2(&cfg, &dataset, &phase1_dir, &args.out)?
        }
        _ => unreachable!("clap constrains --phase to 1..=2"),
    };

    record.record_output(
        report
            .checkpoint_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    record.record_output(
        report
            .loss_csv
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    record.write(&args.out)?;

    let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "phase {}: {} epochs, loss {first:.6} → {last:.6}, checkpoint {}",
        args.phase,
        report.epoch_losses.len(),
        report.checkpoint_dir.display()
    );
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let dataset = read_dataset_for(&cfg)?;
    let store = load_checkpoint(&args.checkpoint)?;

    let mut opts = InferOptions::from_config(&cfg);
    if let Some(split) = args.split {
        opts.split = split;
    }
    if let Some(m) = args.hypotheses {
        opts.hypotheses = m;
    }
    opts.ablation = AblationFlags {
        disable_global: args.disable_global,
        disable_local: args.disable_local,
        disable_temporal: args.disable_temporal,
        disable_structural: args.disable_structural,
    };

    let result = infer_split(&cfg, &dataset, &store, &opts)?;
    write_predictions(&args.out, &result)?;

    let mut record = RunRecord::new("infer", opts.seed, &cfg);
    record.record_input(&args.config)?;
    record.record_input(&cfg.dataset)?;
    record.record_input(&args.checkpoint)?;
    for file in result.index.files.values() {
        record.record_output(file.clone());
    }
    record.record_output("index.json");
    record.write(&args.out)?;

    println!(
        "refined {} frames of '{}' with M={} → {}",
        result.index.frames,
        result.index.split,
        result.index.hypotheses,
        args.out.display()
    );
    Ok(())
}

fn print_report_line(label: &str, report: &EvalReport) {
    println!(
        "{label}: MPJPE {:.3} mm, PA-MPJPE {:.3} mm, motion power {:.6} (gt {:.6}), {} frames",
        report.aggregate_mpjpe_mm,
        report.aggregate_pa_mpjpe_mm,
        report.aggregate_akv_m2,
        report.aggregate_gt_akv_m2,
        report.frames
    );
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, None)?;
    let dataset = read_dataset_for(&cfg)?;

    match (&args.predictions[..], &args.checkpoint) {
        ([], None) => Err(usage("eval needs --predictions DIR (repeatable) or --checkpoint DIR")),
        (dirs @ [_, ..], None) => eval_predictions(&args, &cfg, &dataset, dirs),
        ([], Some(checkpoint)) => eval_seeds(&args, &cfg, &dataset, checkpoint),
        _ => unreachable!("clap marks --predictions and --checkpoint as conflicting"),
    }
}

/// Scores already-written prediction directories: refined poses in
/// `report.json`, their coarse inputs in `coarse_report.json`.
fn eval_predictions(
    args: &EvalArgs,
    cfg: &RunConfig,
    dataset: &Dataset,
    dirs: &[PathBuf],
) -> Result<(), CliError> {
    let mut record = RunRecord::new("eval", cfg.seed, cfg);
    record.record_input(&args.config)?;
    record.record_input(&cfg.dataset)?;

    for dir in dirs {
        let result = read_predictions(dir)?;
        let split = args.split.clone().unwrap_or_else(|| result.index.split.clone());
        let view = SplitView::new(&dataset.manifest, &dataset.splits, &split)?;

        let refined = evaluate(view, &result.refined, &split)?;
        let coarse = evaluate(view, &result.coarse, &split)?;

        let out_dir = if dirs.len() == 1 {
            args.out.clone()
        } else {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "predictions".into());
            args.out.join(name)
        };
        write_report(&out_dir, &refined)?;
        let coarse_path = out_dir.join("coarse_report.json");
        let text = serde_json::to_string_pretty(&coarse)
            .map_err(|e| HarnessError::Config(format!("report serialization: {e}")))?;
        std::fs::write(&coarse_path, text)
            .map_err(|source| HarnessError::Io { path: coarse_path, source })?;

        record.record_input(dir)?;
        print_report_line(&format!("{} refined", dir.display()), &refined);
        print_report_line(&format!("{} coarse ", dir.display()), &coarse);
    }
    record.record_output("report.json");
    record.record_output("frames.csv");
    record.record_output("coarse_report.json");
    record.write(&args.out)?;
    Ok(())
}

/// Runs inference once per seed from `checkpoint`, scores each run, and
/// reports the cross-seed mean ± sample std of the headline metrics.
fn eval_seeds(
    args: &EvalArgs,
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: &Path,
) -> Result<(), CliError> {
    let store = load_checkpoint(checkpoint)?;
    let seeds = args.seeds.clone().unwrap_or_else(|| cfg.eval_seeds.clone());
    if seeds.is_empty() {
        return Err(usage("--seeds is empty and the config names no eval seeds"));
    }

    let mut record = RunRecord::new("eval --seeds", cfg.seed, cfg);
    record.record_input(&args.config)?;
    record.record_input(&cfg.dataset)?;
    record.record_input(checkpoint)?;

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut opts = InferOptions::from_config(cfg);
        opts.seed = seed;
        if let Some(split) = &args.split {
            opts.split = split.clone();
        }
        let result = infer_split(cfg, dataset, &store, &opts)?;
        let view = SplitView::new(&dataset.manifest, &dataset.splits, &opts.split)?;
        let report = evaluate(view, &result.refined, &opts.split)?;

        let seed_dir = args.out.join(format!("seed{seed}"));
        write_predictions(&seed_dir, &result)?;
        write_report(&seed_dir, &report)?;
        record.record_output(format!("seed{seed}"));
        print_report_line(&format!("seed {seed}"), &report);
        runs.push((seed, report));
    }

    let summary = summarize_seeds(&runs)?;
    let summary_path = args.out.join("seed_summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| HarnessError::Config(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, text)
        .map_err(|source| HarnessError::Io { path: summary_path, source })?;
    record.record_output("seed_summary.json");
    record.write(&args.out)?;

    println!(
        "across {} seeds: MPJPE {:.3} ± {:.3} mm, PA-MPJPE {:.3} ± {:.3} mm",
        summary.seeds.len(),
        summary.mpjpe_mm.mean,
        summary.mpjpe_mm.std,
        summary.pa_mpjpe_mm.mean,
        summary.pa_mpjpe_mm.std
    );
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<(), CliError> {
    if args.attention {
        return inspect_attention(args);
    }
    match (&args.dataset, &args.checkpoint) {
        (None, None) => {
            Err(usage("inspect needs --dataset, --checkpoint, or --attention"))
        }
        (dataset, checkpoint) => {
            if let Some(dir) = dataset {
                inspect_dataset(dir)?;
            }
            if let Some(dir) = checkpoint {
                inspect_checkpoint(dir)?;
            }
            Ok(())
        }
    }
}

fn inspect_dataset(dir: &Path) -> Result<(), CliError> {
    let dataset = read_dataset(dir)?;
    let m = &dataset.manifest;
    println!(
        "dataset {}: capacity {} points/frame, {}-frame windows, ±{} m crop",
        dir.display(),
        m.n_max,
        m.concat_window,
        m.crop_half_extent
    );
    println!(
        "noise: dispersion {} m, dropout {}, ghosts {}/frame, {} points/limb",
        m.noise.dispersion_sigma,
        m.noise.segment_dropout_prob,
        m.noise.ghost_rate,
        m.noise.points_per_limb
    );
    for (info, data) in m.splits.iter().zip(&dataset.splits) {
        let valid: usize = data.mask.iter().map(|&b| usize::from(b != 0)).sum();
        let mean_valid = valid as f64 / data.mask.nrows() as f64;
        println!(
            "split '{}': {} scenes, {} frames, mean {mean_valid:.1} valid points",
            info.name,
            info.scenes.len(),
            data.poses.nrows()
        );
        for scene in &info.scenes {
            println!(
                "  {}: preset {}, {} frames @ {} s, seed {}",
                scene.name,
                scene.preset.name(),
                scene.frames,
                scene.frame_period,
                scene.seed
            );
        }
    }
    Ok(())
}

fn inspect_checkpoint(dir: &Path) -> Result<(), CliError> {
    let store = load_checkpoint(dir)?;
    println!(
        "checkpoint {}: {} tensors, {} scalars, optimizer step {}, EMA {}",
        dir.display(),
        store.len(),
        store.parameter_count(),
        store.step(),
        if store.has_ema() { "yes" } else { "no" }
    );
    let mut by_prefix: std::collections::BTreeMap<&str, (usize, usize)> =
        std::collections::BTreeMap::new();
    for name in store.names() {
        let prefix = name.split('.').next().unwrap_or(name);
        let count = store.get(name).map(|a| a.len()).unwrap_or(0);
        let entry = by_prefix.entry(prefix).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += count;
    }
    for (prefix, (tensors, scalars)) in by_prefix {
        println!("  {prefix}.*: {tensors} tensors, {scalars} scalars");
    }
    Ok(())
}

/// Runs the global stack on one frame and writes every layer's per-head
/// post-softmax attention grid to `attention.json`.
fn inspect_attention(args: InspectArgs) -> Result<(), CliError> {
    let (config, checkpoint, dataset_dir, frame, out) = match (
        &args.config,
        &args.checkpoint,
        &args.dataset,
        args.frame,
        &args.out,
    ) {
        (Some(c), Some(k), Some(d), Some(f), Some(o)) => (c, k, d, f, o),
        _ => {
            return Err(usage(
                "--attention needs --config, --checkpoint, --dataset, --frame, and --out",
            ))
        }
    };
    let cfg = RunConfig::load(config)?;
    let dataset = read_dataset(dataset_dir)?;
    let store = load_checkpoint(checkpoint)?;
    let model = PoseModel::from_config(&cfg.conditioning)?;
    model.check_phase1_compatible(&store)?;

    let split = args.split.clone().unwrap_or_else(|| cfg.eval_split.clone());
    let view = SplitView::new(&dataset.manifest, &dataset.splits, &split)?;
    if frame >= view.frames() {
        return Err(usage(format!(
            "frame {frame} is out of range; split '{split}' has {} frames",
            view.frames()
        )));
    }

    let padded = view.padded_frame(frame)?;
    let mut sess = TapeSession::new(&store, false, 0);
    let probe: GrcProbe = if model.frame_encodable(&padded) {
        let prepared = model.pc.prepare(&padded)?;
        let counts = [prepared.anchor_count];
        let tokens = model.pc.forward(&mut sess, std::slice::from_ref(&prepared))?;
        model.grc.forward_probed(
            &mut sess,
            1,
            Some(radpose::cond::TokenBatch { tokens, counts: &counts }),
        )?
    } else {
        model.grc.forward_probed(&mut sess, 1, None)?
    };

    let grids: Vec<Vec<Vec<Vec<f64>>>> = probe
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|grid| grid.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect()
        })
        .collect();
    let dump = serde_json::json!({
        "split": split,
        "frame": frame,
        "scene": view.scene_name(view.scene_of(frame)),
        "valid_points": padded.n_valid(),
        "tokens_per_frame": probe.tokens_per_frame,
        "joint_rows": radpose::skeleton::JOINT_COUNT,
        "layers": grids,
    });
    std::fs::create_dir_all(out)
        .map_err(|source| HarnessError::Io { path: out.clone(), source })?;
    let path = out.join("attention.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("serializes"))
        .map_err(|source| HarnessError::Io { path: path.clone(), source })?;

    let mut record = RunRecord::new("inspect --attention", cfg.seed, &cfg);
    record.record_input(config)?;
    record.record_input(dataset_dir)?;
    record.record_input(checkpoint)?;
    record.record_output("attention.json");
    record.write(out)?;

    let mut line = format!(
        "frame {frame} of '{split}': {} layers × {} heads over {} rows",
        probe.attention.len(),
        probe.attention.first().map(|h| h.len()).unwrap_or(0),
        probe.tokens_per_frame
    );
    let _ = write!(line, " → {}", path.display());
    println!("{line}");
    Ok(())
}
