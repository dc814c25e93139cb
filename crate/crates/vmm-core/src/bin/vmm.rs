use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vmm_core::cli;

/// Variational method of moments estimation, simulation, and verification.
#[derive(Parser)]
#[command(name = "vmm", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a conditional moment model on CSV data.
    Estimate {
        /// JSON configuration file.
        #[arg(long)]
        config: PathBuf,
        /// CSV data file with a header row.
        #[arg(long)]
        data: PathBuf,
        /// Output JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of fitted residuals.
        #[arg(long)]
        residuals: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte Carlo experiment from a JSON configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory for reps.csv and summary.json.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the parallel flag.
        #[arg(long)]
        parallel: Option<bool>,
    },
    /// Run a named verification suite with fresh random instances.
    Verify {
        /// One of: lemma1, lemma6, lemma7, variational-identity, gradients,
        /// kstep, efficiency, coverage, neural-dominance.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match &args.command {
        Command::Estimate {
            config,
            data,
            out,
            residuals,
            seed,
        } => cli::cmd_estimate(config, data, out, residuals.as_deref(), *seed),
        Command::Simulate {
            config,
            out_dir,
            seed,
            parallel,
        } => cli::cmd_simulate(config, out_dir, *seed, *parallel),
        Command::Verify { suite, seed, out } => cli::cmd_verify(suite, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
