//! `metasplit` — run one experiment from a JSON config and write its report.
//!
//! Exit status: 0 when every acceptance check passed, 2 when the run
//! completed but at least one check failed, 1 on any error (bad arguments,
//! unreadable or invalid config, runtime failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use metasplit_core::harness::{run, write_report, Experiment, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(
    name = "metasplit",
    version,
    about = "Meta-learning train/validation-splitting experiments",
    after_help = "Experiments: table2, oracle_validation, rank_scan, gradcheck, bounds_check"
)]
struct Cli {
    /// Experiment to run.
    experiment: String,

    /// JSON config file (must carry schema_version; unknown keys rejected).
    #[arg(long)]
    config: PathBuf,

    /// Root seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for report.json / table.csv / spectrum.csv
    /// (default: the config's out_dir, else out/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Dotted-path config override, repeatable: --override train.outer_steps=500
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    // Usage errors must exit 1 (clap's default of 2 is reserved for
    // completed-but-failed runs), while --help/--version stay successful.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let experiment: Experiment = cli.experiment.parse()?;
    let mut config = ExperimentConfig::load(&cli.config, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    let report = run(experiment, &config)?;

    let out_dir = cli
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(experiment.slug()));
    write_report(&out_dir, &report)?;

    println!("{} (seed {})", report.experiment, report.seed);
    for check in &report.checks {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("  [{tag}] {}: {}", check.name, check.detail);
    }
    println!(
        "{} cells, {} trained models, {:.1}s",
        report.cells.len(),
        report.models.len(),
        report.wall_clock_seconds
    );
    println!("report written to {}", out_dir.display());
    println!("overall: {}", if report.all_passed { "PASS" } else { "FAIL" });
    Ok(report.all_passed)
}
