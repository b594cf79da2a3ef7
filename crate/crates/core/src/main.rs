use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rangeloc::harness::{self, BatchSummary, Scenario, BOUNDED_RATIO};

#[derive(Parser)]
#[command(name = "rangeloc", version, about = "Range-only collaborative localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (or a seeded Monte Carlo batch) and write CSV output.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Rank of the observability matrix at the scenario's configuration.
    Observability {
        scenario: PathBuf,
        /// Seconds from scenario start; initial poses when omitted.
        #[arg(long)]
        time: Option<f64>,
    },
    /// Re-run the filter on a recorded packet log.
    Replay {
        log: PathBuf,
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run only the initialization pipeline and print its report.
    InitDemo { scenario: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> rangeloc::Result<Scenario> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> rangeloc::Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            runs,
            out,
        } => {
            let s = load(&scenario, seed)?;
            if runs <= 1 {
                let output = harness::run_scenario(&s)?;
                for (k, v) in output.metrics.summary_rows() {
                    println!("{k}: {v}");
                }
                print_written(&harness::write_outputs(&output, &out)?);
            } else {
                let results = harness::monte_carlo(&s, runs);
                for (k, r) in results.iter().enumerate() {
                    if let Err(e) = r {
                        log::warn!("run {k} (seed {}) failed: {e}", s.seed.wrapping_add(k as u64));
                    }
                }
                let summary = BatchSummary::from_runs(&results, BOUNDED_RATIO);
                for (k, v) in summary.rows() {
                    println!("{k}: {v}");
                }
                print_written(&harness::write_batch(&out, &results, &summary)?);
            }
        }
        Command::Observability { scenario, time } => {
            let s = Scenario::load(&scenario)?;
            let report = harness::observability_report(&s, time)?;
            println!("{report}");
            println!("singular_values: {:?}", report.singular_values);
            println!("# regime,rank,predicted_rank,state_dimension,full");
            println!(
                "{},{},{},{},{}",
                report.regime.map(|r| r.to_string()).unwrap_or_default(),
                report.rank,
                report.predicted_rank.map(|r| r.to_string()).unwrap_or_default(),
                report.state_dimension,
                report.is_full()
            );
        }
        Command::Replay { log, scenario, out } => {
            let s = load(&scenario, None)?;
            let output = harness::replay(BufReader::new(File::open(&log)?), &s)?;
            for (k, v) in output.metrics.summary_rows() {
                println!("{k}: {v}");
            }
            print_written(&harness::write_outputs(&output, &out)?);
        }
        Command::InitDemo { scenario } => {
            let s = Scenario::load(&scenario)?;
            print!("{}", harness::run_initialization(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
