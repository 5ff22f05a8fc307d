use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerseg_cli::{commands, Ablation, Common, Overrides, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(
    name = "layerseg",
    version,
    about = "Layer-surface segmentation with topology guarantees"
)]
struct Cli {
    /// TOML file with `[synth]` and `[train]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the synthesis and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Continue the run in `--out` from its last checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    /// Keep labels on this fraction of annotated training samples
    /// (for `synth`: fraction of generated samples that are labeled).
    #[arg(long, global = true)]
    labeled_fraction: Option<f64>,
    /// Ablations; may be repeated.
    #[arg(long, global = true, value_enum)]
    ablate: Vec<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train, val and test splits of synthetic B-scans.
    Synth,
    /// Train a model.
    Train {
        /// Dataset directory or corpus root with `train` and `val` splits.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset, if not under `--data`.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or corpus root (uses its `test` split).
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict surfaces for every sample of a dataset.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the anatomical factors, texture and reconstruction of one sample.
    InspectFactors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id or index.
        #[arg(long, default_value = "0")]
        sample: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    let common = Common {
        config: cli.config,
        out: cli.out,
        resume: cli.resume,
        overrides: Overrides {
            seed: cli.seed,
            labeled_fraction: cli.labeled_fraction,
            ablations: cli.ablate,
        },
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::Synth => {
            commands::synth(&common)?;
            println!("corpus written to {}", common.out.display());
        }
        Command::Train { data, val } => {
            let s = commands::train(&common, &data, val.as_deref())?;
            match (s.best_step, s.best_rmse) {
                (Some(step), Some(rmse)) => {
                    println!(
                        "trained {} steps; best val RMSE {rmse:.4} px at step {step}",
                        s.steps
                    )
                }
                _ => println!("trained {} steps", s.steps),
            }
        }
        Command::Eval { checkpoint, data } => {
            let r = commands::eval(&common, &checkpoint, &data)?;
            print!("{}", commands::report_csv(&r));
        }
        Command::Segment { checkpoint, data } => {
            let n = commands::segment(&common, &checkpoint, &data)?;
            println!("wrote surfaces for {n} samples");
        }
        Command::InspectFactors {
            checkpoint,
            data,
            sample,
        } => {
            for p in commands::inspect_factors(&common, &checkpoint, &data, &sample)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
