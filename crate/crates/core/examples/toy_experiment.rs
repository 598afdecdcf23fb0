//! Runs the toy training experiment: full model and pooling ablation against
//! the trivial predictors. Usage: `toy_experiment [out_dir] [steps] [frames_per_scan]`.

use std::path::PathBuf;
use std::time::Instant;

use sonotrack::experiment::{report_table, ExperimentConfig, ExperimentData};
use sonotrack::network::ModelConfig;

fn main() -> sonotrack::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_experiment".into()));
    let mut cfg = ExperimentConfig::toy();
    if let Some(steps) = args.next() {
        cfg.train.steps = steps.parse().expect("steps");
    }
    if let Some(frames) = args.next() {
        cfg.dataset.base.n_frames = frames.parse().expect("frames_per_scan");
    }
    let t0 = Instant::now();
    let data = ExperimentData::generate(&cfg)?;
    println!(
        "dataset: {} scans in {:.1}s",
        data.scans.len(),
        t0.elapsed().as_secs_f64()
    );
    let [zero, mean] = data.trivial_baselines(cfg.train.weights.epsilon)?;
    let full = data.train_and_score("full", &cfg.model, &cfg.train, cfg.seed, &out.join("full"))?;
    println!(
        "full: {:.0}s, val MMAE {:.5} -> {:.5}",
        full.seconds, full.initial_val_mmae, full.final_val_mmae
    );
    let ablation_cfg = ModelConfig {
        use_gla: false,
        ..cfg.model.clone()
    };
    let abl = data.train_and_score(
        "no-attention",
        &ablation_cfg,
        &cfg.train,
        cfg.seed,
        &out.join("ablation"),
    )?;
    println!(
        "ablation: {:.0}s, val MMAE {:.5} -> {:.5}",
        abl.seconds, abl.initial_val_mmae, abl.final_val_mmae
    );
    println!("{}", report_table(&[&full.summary, &abl.summary, &zero, &mean]));
    Ok(())
}
