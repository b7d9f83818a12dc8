use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcrnet::commands::{
    ablation_table, cmd_ablate, cmd_attn, cmd_eval, cmd_predict, cmd_synth, cmd_train,
};
use mcrnet::config::{RunConfig, SEED_ENV};
use mcrnet::data::SyntheticSpec;

#[derive(Parser)]
#[command(
    name = "mcrnet",
    version,
    about = "Reading comprehension with unanswerable questions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in SQuAD 2.0 format
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint
    Train(TrainArgs),
    /// Score a checkpoint against gold data
    Eval(EvalArgs),
    /// Write JSON-lines predictions
    Predict(PredictArgs),
    /// Train and compare J = 2, 1, 0 relation blocks
    Ablate(TrainArgs),
    /// Export per-step relation attention
    Attn(AttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.33)]
    unanswerable_frac: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    keys: usize,
    #[arg(long, default_value_t = 4)]
    polarity_pairs: usize,
    #[arg(long, default_value_t = 8)]
    min_filler: usize,
    #[arg(long, default_value_t = 14)]
    max_filler: usize,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Relation blocks J
    #[arg(long)]
    steps: Option<usize>,
    /// Any config key, repeatable: `--set lr=0.002`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Override the checkpoint's abstention threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated thresholds for an unanswerable P/R/F1 sweep
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    /// Write the report as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also write grayscale PGM heatmaps
    #[arg(long)]
    images: bool,
    /// Only the first N examples
    #[arg(long)]
    limit: Option<usize>,
}

fn resolve(args: &TrainArgs) -> mcrnet::Result<RunConfig> {
    let mut overrides = Vec::new();
    let path = |p: &Path| p.display().to_string();
    if let Some(p) = &args.train {
        overrides.push(("train_path".to_string(), path(p)));
    }
    if let Some(p) = &args.dev {
        overrides.push(("dev_path".to_string(), path(p)));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(e) = args.epochs {
        overrides.push(("epochs".to_string(), e.to_string()));
    }
    if let Some(j) = args.steps {
        overrides.push(("steps".to_string(), j.to_string()));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| mcrnet::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), &overrides, env_seed.as_deref())
}

fn run(cli: Cli) -> mcrnet::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                vocab_size: a.vocab_size,
                keys: a.keys,
                polarity_pairs: a.polarity_pairs,
                n: a.n,
                unanswerable_frac: a.unanswerable_frac,
                seed: a.seed,
                min_filler: a.min_filler,
                max_filler: a.max_filler,
                distractors: a.distractors,
            };
            let n = cmd_synth(&spec, &a.out)?;
            println!("wrote {n} examples to {}", a.out.display());
        }
        Command::Train(a) => {
            let config = resolve(&a)?;
            let summary = cmd_train(&config, &a.out)?;
            for line in &summary.history {
                println!(
                    "epoch {}  steps {}  L_span {:.4}  L_ans {:.4}  L_joint {:.4}{}",
                    line.epoch,
                    line.steps,
                    line.loss_span,
                    line.loss_ans,
                    line.loss_joint,
                    line.dev
                        .as_ref()
                        .map(|r| format!("  dev EM {:.4}  F1 {:.4}", r.em, r.f1))
                        .unwrap_or_default()
                );
            }
            println!(
                "trained on {} examples ({} flagged, {} lost to truncation)",
                summary.trained_on, summary.flagged, summary.truncated_away
            );
            if let Some(r) = &summary.best_dev {
                print!("{}", r.to_table());
            }
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Eval(a) => {
            let out = cmd_eval(
                &a.checkpoint,
                &a.gold,
                a.threshold,
                &a.sweep,
                a.out.as_deref(),
            )?;
            print!("{}", out.report.to_table());
            if !out.sweep.is_empty() {
                println!(
                    "{:>9}  {:>9}  {:>9}  {:>9}",
                    "threshold", "precision", "recall", "f1"
                );
                for r in &out.sweep {
                    println!(
                        "{:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
                        r.threshold, r.precision, r.recall, r.f1
                    );
                }
            }
        }
        Command::Predict(a) => {
            let n = cmd_predict(&a.checkpoint, &a.data, &a.out, a.threshold)?;
            println!("wrote {n} predictions to {}", a.out.display());
        }
        Command::Ablate(a) => {
            let config = resolve(&a)?;
            let rows = cmd_ablate(&config, &a.out)?;
            print!("{}", ablation_table(&rows));
        }
        Command::Attn(a) => {
            let dump = cmd_attn(&a.checkpoint, &a.data, &a.out, a.images, a.limit)?;
            println!(
                "wrote {} examples x {} steps to {}",
                dump.examples.len(),
                dump.relation_steps,
                a.out.join("attention.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
