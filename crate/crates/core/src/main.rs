use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nearfield::harness::{
    read_results, run_experiment, summarize, write_results, write_summary, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "nearfield",
    version,
    about = "Near-field channel estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo sweep and write results.csv, timings.csv and summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` in the config, default "results").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate a results file by method and sweep value.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => (|| {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let rows = run_experiment(&cfg, threads)?;
            let (results, _) = write_results(&rows, &dir)?;
            write_summary(&summarize(&rows), &dir.join("summary.csv"))?;
            let failed = rows.iter().filter(|r| r.failed).count();
            eprintln!(
                "{} rows ({failed} failed) written to {}",
                rows.len(),
                results.display()
            );
            Ok::<_, nearfield::Error>(())
        })(),
        Command::Summarize { input, out } => (|| {
            let rows = read_results(&input)?;
            write_summary(&summarize(&rows), &out)?;
            Ok(())
        })(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, nearfield::Error::Config(_)) {
                2
            } else {
                1
            })
        }
    }
}
