//! `fastfill`: generate synthetic worlds, train alignment models, run
//! backfilling experiments and analyses from a JSON config.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastfill_core::experiment::{Experiment, ExperimentConfig};
use fastfill_core::Error;

#[derive(Debug, Parser)]
#[command(name = "fastfill", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the paired old/new feature sets of every seed.
    Gen(RunArgs),
    /// Train the classifier head and the alignment net of every seed.
    Train(RunArgs),
    /// Run every ordering policy and write curves plus the summary table.
    Backfill(RunArgs),
    /// Correlation, flip and subgroup analyses of a finished run.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Run directory; defaults to `output_dir` of `--config`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment config, used only to locate the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn experiment(args: &RunArgs) -> Result<Experiment, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        config = config.with_seed_override(seed);
    }
    Experiment::new(config, args.out.clone())
}

fn with_jobs<T>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, Error>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(0) => Err(Error::Config {
            field: "--jobs".into(),
            reason: "must be at least 1".into(),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(args) => {
            let exp = experiment(&args)?;
            let manifests = with_jobs(args.jobs, || exp.gen())?;
            print_json(&manifests)
        }
        Command::Train(args) => {
            let exp = experiment(&args)?;
            let summaries = with_jobs(args.jobs, || exp.train())?;
            for s in &summaries {
                eprintln!(
                    "seed {}: loss {:.4} -> {:.4}, head train accuracy {:.4}",
                    s.seed, s.initial_loss, s.final_loss, s.head_accuracy_train
                );
            }
            Ok(())
        }
        Command::Backfill(args) => {
            let exp = experiment(&args)?;
            let summary = with_jobs(args.jobs, || exp.backfill())?;
            println!(
                "{:<20} {:<10} {:>10} {:>10}",
                "policy", "metric", "M~ mean", "std"
            );
            for r in &summary.rows {
                println!(
                    "{:<20} {:<10} {:>10.4} {:>10.4}",
                    r.policy.to_string(),
                    r.metric.to_string(),
                    r.mean,
                    r.std
                );
            }
            Ok(())
        }
        Command::Analyze(args) => {
            let dir = match (&args.out, &args.config) {
                (Some(out), _) => out.clone(),
                (None, Some(cfg)) => {
                    ExperimentConfig::load(cfg)?
                        .output_dir
                        .ok_or_else(|| Error::Config {
                            field: "output_dir".into(),
                            reason: "no run directory given".into(),
                        })?
                }
                (None, None) => {
                    return Err(Error::Config {
                        field: "--out".into(),
                        reason: "pass --out or --config".into(),
                    })
                }
            };
            let exp = Experiment::open(&dir)?;
            let analysis = with_jobs(args.jobs, || exp.analyze())?;
            for c in &analysis.correlations {
                println!(
                    "seed {}: tau(sigma, l2+disc) {:.4}  tau(sigma, l2) {:.4}  tau(sigma, disc) {:.4}",
                    c.seed, c.tau_l2_plus_disc, c.tau_l2, c.tau_disc
                );
            }
            println!("flip identity holds: {}", analysis.flip_identity_holds);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
