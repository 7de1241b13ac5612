use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phasedcn::config::{Overrides, RunConfig};
use phasedcn::pipeline;
use phasedcn::reconstruct::ReconstructionMode;

/// Exit status when some mixtures could not be evaluated or enhanced.
const PARTIAL_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "phasedcn", version, about = "Phase-aware causal speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reconstruction mode (overrides the config).
    #[arg(long, global = true)]
    mode: Option<ReconstructionMode>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize (if needed) the corpus, write the manifest, fit the normalizer.
    Prepare,
    /// Train, logging losses and writing checkpoints.
    Train,
    /// Enhance one file, or every test mixture when no files are given.
    Enhance {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
    },
    /// Score the test mixtures in every configured mode.
    Evaluate,
    /// Print the per-layer parameter and FLOP table.
    Inspect,
}

fn run(cli: Cli) -> Result<ExitCode, phasedcn::Error> {
    let path = cli
        .config
        .ok_or_else(|| phasedcn::Error::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    cfg.apply(Overrides {
        mode: cli.mode,
        seed: cli.seed,
        threads: cli.threads,
    })?;
    let threads = cfg.threads;
    pipeline::with_threads(threads, move || match cli.command {
        Command::Prepare => {
            let r = pipeline::prepare(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let r = pipeline::train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Enhance { input, output } => match (input, output) {
            (Some(i), Some(o)) => {
                pipeline::enhance_file(&cfg, &i, &o)?;
                println!("wrote {}", o.display());
                Ok(ExitCode::SUCCESS)
            }
            (None, None) => {
                let r = pipeline::enhance_manifest(&cfg)?;
                println!("wrote {} files", r.written.len());
                for (id, e) in &r.failures {
                    eprintln!("{id}: {e}");
                }
                Ok(if r.failures.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(PARTIAL_FAILURE)
                })
            }
            _ => Err(phasedcn::Error::InvalidArgument(
                "enhance takes both <input> and <output>, or neither".into(),
            )),
        },
        Command::Evaluate => {
            let r = pipeline::evaluate(&cfg)?;
            print!("{}", r.to_table());
            Ok(if r.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(PARTIAL_FAILURE)
            })
        }
        Command::Inspect => {
            print!("{}", pipeline::inspect(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
