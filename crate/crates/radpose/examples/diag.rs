use radpose::dataset::read_dataset;
use radpose::harness::{evaluate, infer_split, InferOptions, PoseModel, RunConfig, SplitView};
use radpose::nn::params::{load_checkpoint, ParameterStore};

fn main() {
    let cfg = RunConfig::load(std::path::Path::new("/tmp/cli-smoke/cfg.json")).unwrap();
    let dataset = read_dataset(&cfg.dataset).unwrap();
    let store = load_checkpoint(std::path::Path::new("/tmp/cli-smoke/run/phase2")).unwrap();
    let _ = PoseModel::from_config(&cfg.conditioning).unwrap();

    // Same weights with the EMA shadows dropped: inference then uses the
    // raw final-step parameters.
    let mut raw = ParameterStore::new();
    for name in store.names() {
        raw.insert(&name, store.get(&name).unwrap().clone()).unwrap();
    }
    raw.set_step(store.step());

    let opts = InferOptions::from_config(&cfg);
    let result = infer_split(&cfg, &dataset, &raw, &opts).unwrap();
    let view = SplitView::new(&dataset.manifest, &dataset.splits, "test").unwrap();
    let refined = evaluate(view, &result.refined, "test").unwrap();
    let coarse = evaluate(view, &result.coarse, "test").unwrap();
    println!(
        "raw-weights refined: MPJPE {:.3} mm, PA {:.3} mm, akv {:.6}",
        refined.aggregate_mpjpe_mm, refined.aggregate_pa_mpjpe_mm, refined.aggregate_akv_m2
    );
    println!(
        "raw-weights coarse : MPJPE {:.3} mm, PA {:.3} mm, akv {:.6}",
        coarse.aggregate_mpjpe_mm, coarse.aggregate_pa_mpjpe_mm, coarse.aggregate_akv_m2
    );
}
