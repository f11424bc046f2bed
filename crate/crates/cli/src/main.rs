//! `ctsae`: synthesize data, train, encode, cluster, evaluate, run the
//! ablation grid and check gradients.
//!
//! Exit status: 0 success, 1 configuration error, 2 I/O or data file
//! error, 3 numeric failure (divergence, failed gradient check).

mod commands;
mod error;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult, EXIT_CONFIG};
use crate::run_config::RunConfig;

#[derive(Parser)]
#[command(name = "ctsae", version, about = "Multi-branch CNN-ViT autoencoder for spectrogram clustering")]
struct Cli {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serialize all work onto one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Set any config key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train on a manifest, selecting the best model on the validation split.
    Train(TrainArgs),
    /// Write latent codes for every sample of a manifest.
    Encode(EncodeArgs),
    /// K-means on a latent matrix.
    Cluster(ClusterArgs),
    /// Score a partition against the true labels.
    Evaluate(EvaluateArgs),
    /// Train and score the six architecture variants.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of tiny models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct ModelArgs {
    /// desk, tiny or full.
    #[arg(long)]
    preset: Option<String>,
    /// cls_fusion, all_attention or none.
    #[arg(long)]
    fusion_mode: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV.
    #[arg(long)]
    data: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Latent matrix file; ids go next to it with extension `.ids`.
    #[arg(long)]
    out: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    latents: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Partition file, one label per line.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: Option<String>,
    /// Partition file of true labels.
    #[arg(long)]
    truth: Option<String>,
    /// Labelled manifest, used when no truth file is given.
    #[arg(long)]
    data: Option<String>,
    /// JSON report; defaults to the prediction path with `.eval.json`.
    #[arg(long)]
    report: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Break one backward rule; the check must then fail.
    #[arg(long)]
    inject_bug: bool,
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

impl ModelArgs {
    fn overrides(&self, o: &mut Vec<(&'static str, String)>) {
        push(o, "preset", &self.preset);
        push(o, "fusion_mode", &self.fusion_mode);
    }
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        match self {
            Command::Synth(a) => {
                push(&mut o, "out", &a.out);
                push(&mut o, "classes", &a.classes);
                push(&mut o, "per_class", &a.per_class);
                push(&mut o, "size", &a.size);
                push(&mut o, "noise", &a.noise);
            }
            Command::Train(a) => {
                push(&mut o, "data", &a.data);
                push(&mut o, "out", &a.out);
                push(&mut o, "epochs", &a.epochs);
                push(&mut o, "batch_size", &a.batch_size);
                push(&mut o, "learning_rate", &a.learning_rate);
                a.model.overrides(&mut o);
            }
            Command::Encode(a) => {
                push(&mut o, "checkpoint", &a.checkpoint);
                push(&mut o, "data", &a.data);
                push(&mut o, "out", &a.out);
                a.model.overrides(&mut o);
            }
            Command::Cluster(a) => {
                push(&mut o, "latents", &a.latents);
                push(&mut o, "k", &a.k);
                push(&mut o, "out", &a.out);
            }
            Command::Evaluate(a) => {
                push(&mut o, "pred", &a.pred);
                push(&mut o, "truth", &a.truth);
                push(&mut o, "data", &a.data);
                push(&mut o, "report", &a.report);
            }
            Command::Ablate(a) => {
                push(&mut o, "data", &a.data);
                push(&mut o, "out", &a.out);
                push(&mut o, "epochs", &a.epochs);
                push(&mut o, "seeds", &a.seeds);
                push(&mut o, "preset", &a.preset);
            }
            Command::Gradcheck(_) => {}
        }
        o
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string())?;
    }
    if cli.deterministic {
        cfg.set("deterministic", "true")?;
    }
    Ok(cfg)
}

/// One thread in determinism mode, otherwise at most `CTSAE_THREADS`.
fn configure_threads(cfg: &RunConfig) -> CliResult<()> {
    let cap = match std::env::var("CTSAE_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("CTSAE_THREADS must be a positive integer, got {v:?}")))?),
        Err(_) => None,
    };
    let threads = if cfg.flag("deterministic")? { Some(1) } else { cap };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    configure_threads(&cfg)?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(a) => commands::train(&cfg, a.resume),
        Command::Encode(_) => commands::encode(&cfg),
        Command::Cluster(_) => commands::cluster(&cfg),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, a.inject_bug),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
