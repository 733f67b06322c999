//! `gbsr`: train, evaluate and inspect graph-denoised social recommenders.
//!
//! Exit codes: 0 success, 1 configuration, 2 data or I/O, 3 numeric or
//! checkpoint failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbsr_core::{Error, Result, SyntheticSpec};

use crate::commands::CheckpointArgs;
use crate::config::{read_config_file, set_synth, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gbsr", version, about = "Graph-denoised social recommendation with an HSIC bottleneck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per seed and report test metrics.
    Train(Box<TrainArgs>),
    /// Evaluate saved checkpoints on a dataset.
    Evaluate(CheckpointCommand),
    /// Write per-edge confidences of a checkpoint's denoiser.
    ExportConfidence(CheckpointCommand),
    /// Generate a planted-noise synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key=value file or JSON manifest; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    social: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; default 0,1,2,3,4.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Select the best epoch on a slice of the train set instead of test.
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Stop bottleneck gradients through the original-graph branch.
    #[arg(long)]
    detach_original: bool,
    /// Feed raw rows to the HSIC kernel instead of L2-normalized ones.
    #[arg(long)]
    no_kernel_normalize: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let s = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("interactions", s(&self.interactions));
        put("social", s(&self.social));
        put("out", s(&self.out));
        put("seeds", self.seed.clone());
        put("backbone", self.backbone.clone());
        put("dim", self.dim.map(|v| v.to_string()));
        put("layers", self.layers.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("sigma2", self.sigma2.map(|v| v.to_string()));
        put("epsilon", self.epsilon.map(|v| v.to_string()));
        put("temperature", self.temperature.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("eval_every", self.eval_every.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("split_ratio", self.split_ratio.map(|v| v.to_string()));
        put("split_seed", self.split_seed.map(|v| v.to_string()));
        put("validation_fraction", self.validation_fraction.map(|v| v.to_string()));
        put("detach_original", self.detach_original.then(|| "true".into()));
        put("normalize_kernel", self.no_kernel_normalize.then(|| "false".into()));
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut run = RunConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in read_config_file(path)? {
                if k == "command" && v != "train" {
                    return Err(Error::Config(format!("{} is a {v} config", path.display())));
                }
                run.set(&k, &v)?;
            }
        }
        for (k, v) in self.overrides() {
            run.set(k, &v)?;
        }
        Ok(run)
    }
}

#[derive(Debug, Args)]
struct CheckpointCommand {
    /// Checkpoint file; repeat to report several seeds.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    social: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CheckpointCommand {
    fn args(&self) -> CheckpointArgs<'_> {
        CheckpointArgs {
            checkpoints: &self.checkpoint,
            interactions: &self.interactions,
            social: &self.social,
            out: self.out.as_deref(),
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// key=value file or a previous synth manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    users_per_cluster: Option<usize>,
    #[arg(long)]
    items_per_cluster: Option<usize>,
    #[arg(long)]
    interaction_rate: Option<f64>,
    #[arg(long)]
    intra_social_rate: Option<f64>,
    /// Noise edges as a fraction of genuine edges.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_ratio: Option<f64>,
}

impl SynthArgs {
    fn resolve(&self) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default();
        if let Some(path) = &self.config {
            for (k, v) in read_config_file(path)? {
                if k == "command" && v != "synth" {
                    return Err(Error::Config(format!("{} is a {v} config", path.display())));
                }
                set_synth(&mut spec, &k, &v)?;
            }
        }
        let flags: [(&str, Option<String>); 8] = [
            ("cluster_count", self.clusters.map(|v| v.to_string())),
            ("users_per_cluster", self.users_per_cluster.map(|v| v.to_string())),
            ("items_per_cluster", self.items_per_cluster.map(|v| v.to_string())),
            ("interaction_rate", self.interaction_rate.map(|v| v.to_string())),
            ("intra_social_rate", self.intra_social_rate.map(|v| v.to_string())),
            ("noise_fraction", self.eta.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("split_ratio", self.split_ratio.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                set_synth(&mut spec, k, &v)?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("GBSR_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GBSR_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Evaluate(args) => commands::evaluate(&args.args()),
        Command::ExportConfidence(args) => commands::export_confidence(&args.args()),
        Command::Synth(args) => commands::synth(&args.resolve()?, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gbsr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
