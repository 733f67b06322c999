use std::path::{Path, PathBuf};

use gbsr_core::checkpoint;
use gbsr_core::data::{self, generate_synthetic, write_noise_labels};
use gbsr_core::io::atomic_write;
use gbsr_core::trainer::{self, TrainConfig};
use gbsr_core::{Dataset, Error, MetricsReport, Result, SyntheticSpec};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(interactions: &Path, social: &Path, config: &TrainConfig) -> Result<Dataset> {
    data::load_dataset(interactions, social, config.split_ratio, config.split_seed)
}

pub fn train(run: &RunConfig) -> Result<()> {
    run.train.validate()?;
    let interactions = RunConfig::require(&run.interactions, "interactions")?;
    let social = RunConfig::require(&run.social, "social")?;
    let out = RunConfig::require(&run.out, "out")?;
    let dataset = load(interactions, social, &run.train)?;
    create_dir(out)?;
    write_json(&out.join("manifest.json"), &run.manifest())?;
    eprintln!(
        "loaded {} users, {} items, {} train / {} test interactions, {} social edges",
        dataset.user_count(),
        dataset.item_count(),
        dataset.train().len(),
        dataset.test().len(),
        dataset.social_edges().len()
    );

    let mut runs = Vec::with_capacity(run.seeds.len());
    for &seed in &run.seeds {
        let config = TrainConfig { seed, ..run.train.clone() };
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let outcome = trainer::fit(&config, &dataset)?;
        atomic_write(&dir.join("train_log.jsonl"), outcome.log_jsonl().as_bytes())?;
        checkpoint::save(&dir.join("checkpoint.gbsr"), &outcome.best, &config)?;
        let metrics = trainer::evaluate_state(&outcome.best, &dataset, &config)?;
        eprintln!(
            "seed {seed}: best epoch {} of {}, test Recall@20 {:.4}",
            outcome.best.best_epoch,
            outcome.last.epoch,
            metrics.recall(20).unwrap_or(f64::NAN)
        );
        runs.push(metrics);
    }
    let report = MetricsReport::from_runs(runs)?;
    write_json(&out.join("metrics.json"), &report.to_json())?;
    println!("{}", report.to_json());
    Ok(())
}

pub struct CheckpointArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub interactions: &'a Path,
    pub social: &'a Path,
    pub out: Option<&'a Path>,
}

/// Loads the dataset with the split recorded in the first checkpoint.
fn dataset_for(args: &CheckpointArgs<'_>) -> Result<(Dataset, TrainConfig)> {
    let first = args
        .checkpoints
        .first()
        .ok_or_else(|| Error::Config("at least one --checkpoint is required".into()))?;
    let config = checkpoint::read_config(first)?;
    let dataset = load(args.interactions, args.social, &config)?;
    Ok((dataset, config))
}

pub fn evaluate(args: &CheckpointArgs<'_>) -> Result<()> {
    let (dataset, _) = dataset_for(args)?;
    let mut runs = Vec::new();
    for path in args.checkpoints {
        let (state, config) = checkpoint::load(path, &dataset)?;
        runs.push(trainer::evaluate_state(&state, &dataset, &config)?);
    }
    let report = MetricsReport::from_runs(runs)?;
    if let Some(out) = args.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &report.to_json())?;
    }
    println!("{}", report.to_json());
    Ok(())
}

pub fn export_confidence(args: &CheckpointArgs<'_>) -> Result<()> {
    let (dataset, _) = dataset_for(args)?;
    let out = args
        .out
        .ok_or_else(|| Error::Config("missing required setting \"out\"".into()))?;
    let (state, _) = checkpoint::load(&args.checkpoints[0], &dataset)?;
    let map = trainer::confidence_map(&state, &dataset)?;
    let (mean, variance) = map.confidence_stats();
    create_dir(out)?;
    map.export_csv(&dataset, &out.join("confidence.csv"))?;
    let summary = json!({"edges": map.len(), "mean": mean, "variance": variance});
    write_json(&out.join("confidence_summary.json"), &summary)?;
    println!("edges={} mean={mean} variance={variance}", map.len());
    Ok(())
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let (dataset, labels) = generate_synthetic(spec)?;
    create_dir(out)?;
    dataset.write_interactions(&out.join("interactions.tsv"))?;
    dataset.write_social(&out.join("social.tsv"))?;
    write_noise_labels(&dataset, &labels, &out.join("noise_labels.tsv"))?;
    let mut manifest = serde_json::to_value(spec).expect("spec serializes");
    manifest["command"] = "synth".into();
    write_json(&out.join("manifest.json"), &manifest)?;
    let noise = labels.iter().filter(|&&n| n).count();
    println!(
        "users={} items={} interactions={} social_edges={} noise_edges={noise}",
        dataset.user_count(),
        dataset.item_count(),
        dataset.train().len() + dataset.test().len(),
        labels.len()
    );
    Ok(())
}
