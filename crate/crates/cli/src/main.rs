use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unshadow::commands::{cmd_eval, cmd_sample, cmd_synth, cmd_train, render_eval_table};
use unshadow::config::RunConfig;
use unshadow::sampler::WeightPolicy;

#[derive(Parser)]
#[command(name = "unshadow", version, about = "Patch-based diffusion shadow removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the paired diffusion models on a triplet directory
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint
    Sample(SampleArgs),
    /// Score predictions against ground truth over shadow and lit regions
    Eval(EvalArgs),
    /// Generate a synthetic shadow triplet dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override its fields
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue from output_dir/last.ckpt
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// JSON run configuration; flags below override its fields
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file; its EMA weights drive the sampler
    #[arg(long)]
    ckpt: PathBuf,
    /// Shadow-affected input PNG
    #[arg(long)]
    input: PathBuf,
    /// Binary shadow-mask PNG
    #[arg(long)]
    mask: PathBuf,
    /// Restored output PNG
    #[arg(long)]
    out: PathBuf,
    /// Patch weighting: gss, uniform, bri-only, or mask-only
    #[arg(long, default_value = "gss")]
    weights: WeightPolicy,
    #[arg(long)]
    seed: Option<u64>,
    /// Also dump per-step per-patch scores to CSV and print step summaries
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted PNGs
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth PNGs (same file names)
    #[arg(long)]
    gt: PathBuf,
    /// Directory of shadow-mask PNGs (same file names)
    #[arg(long)]
    mask: PathBuf,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    /// Accepted for interface uniformity; evaluation draws no random numbers
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of triplets to generate
    #[arg(long)]
    n: usize,
    /// Square image edge in pixels
    #[arg(long)]
    size: usize,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = args.epochs {
                cfg.epochs = epochs;
            }
            if let Some(dir) = args.train_dir {
                cfg.train_dir = Some(dir);
            }
            if let Some(dir) = args.val_dir {
                cfg.val_dir = Some(dir);
            }
            if let Some(dir) = args.output_dir {
                cfg.output_dir = dir;
            }
            let outcome = cmd_train(&cfg, args.resume)?;
            println!(
                "trained {} epoch(s); checkpoint {}; log {}",
                outcome.epochs_run,
                outcome.last_checkpoint.display(),
                outcome.log_path.display()
            );
            if let Some(best) = outcome.best_checkpoint {
                println!("best checkpoint {}", best.display());
            }
        }
        Command::Sample(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let got = cmd_sample(&cfg, &args.ckpt, &args.input, &args.mask, &args.out, args.weights, args.verbose)?;
            println!("wrote {}", got.out_path.display());
            if let Some(scores) = got.scores_path {
                println!("scores {}", scores.display());
            }
        }
        Command::Eval(args) => {
            let summary = cmd_eval(&args.pred, &args.gt, &args.mask, &args.out)?;
            print!("{}", render_eval_table(&summary));
            println!("report written to {}", args.out.display());
        }
        Command::Synth(args) => {
            cmd_synth(args.n, args.size, &args.out, args.seed)?;
            println!("wrote {} triplet(s) to {}", args.n, args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
