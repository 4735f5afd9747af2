use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use enkf::harness::{run_inversion, run_oracle, run_twin_experiment, RunConfig};
use enkf::transport::run_family_suite;
use enkf::Error;

#[derive(Parser)]
#[command(name = "enkf", about = "Ensemble Kalman filtering and inversion experiments", version)]
struct Cli {
    /// Size of the worker thread pool (default: all cores). Outputs are
    /// byte-identical at any setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment from a configuration file.
    Filter {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ensemble Kalman inversion from a configuration file.
    Invert {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify the second-order transport families and print a pass/fail table.
    TransportCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump a grid-posterior oracle for a configured problem.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code 2 for configuration problems, 3 for numerical failures.
fn classify(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Alignment(_) | Error::StepMismatch { .. } => 2,
        _ => 3,
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(dir) = out {
        cfg = cfg.with_out_dir(dir);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Filter { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let result = run_twin_experiment(&cfg)?;
            println!("steps = {}", result.record.len() - 1);
            println!("mse = {:.6e}", result.mse);
            if let Some(path) = result.csv_path {
                println!("wrote {}", path.display());
            }
        }
        Command::Invert { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let result = run_inversion(&cfg)?;
            if let Some(last) = result.iterations.last() {
                print!("final mean =");
                for x in last.mean.iter() {
                    print!(" {x:.6}");
                }
                print!("\nfinal std  =");
                for x in last.std.iter() {
                    print!(" {x:.6}");
                }
                println!();
            }
            if let Some(v) = result.verdict {
                println!("{v}");
            }
            for f in result.files {
                println!("wrote {}", f.display());
            }
        }
        Command::TransportCheck { seed } => {
            let report = run_family_suite(seed)?;
            println!("{:<32} {:>6}  detail", "check", "result");
            for line in &report.lines {
                println!(
                    "{:<32} {:>6}  {}",
                    line.name,
                    if line.pass { "pass" } else { "FAIL" },
                    line.detail
                );
            }
            if !report.all_pass() {
                return Err(Error::NotInFamily { min_eig: f64::NAN });
            }
        }
        Command::Oracle { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let result = run_oracle(&cfg)?;
            print!("mean =");
            for x in result.mean.iter() {
                print!(" {x:.8}");
            }
            println!();
            println!("cov = {:?}", result.cov.as_slice());
            for f in result.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(classify(&err))
        }
    }
}
