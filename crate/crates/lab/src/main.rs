use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsbohm_lab::output::export;
use nsbohm_lab::run::{run_loaded, sweep_loaded};
use nsbohm_lab::{presets, verify_all, LabError, RunReport, Scenario, VerifyOptions};

#[derive(Parser)]
#[command(name = "nsbohm", version, about = "Bohmian trajectories with infinitesimal perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Scenario file (TOML).
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Use a built-in scenario instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; defaults to the scenario's `output_dir` or `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run(Source),
    /// Run a scenario's ε list in parallel and write the sweep table.
    Sweep(Source),
    /// Run the acceptance criteria.
    Verify {
        /// Worker threads.
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated criterion numbers (1-10).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        only: Option<Vec<u8>>,
        /// Write verify.csv and verify.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Multiply all guidance velocities; anything but 1 is a deliberate fault.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        velocity_scale: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in scenarios.
    Presets {
        /// Print one preset's TOML.
        #[arg(long)]
        show: Option<String>,
    },
    /// Re-emit the CSV files of a run directory from its results.json.
    Export {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(src: &Source) -> Result<Scenario, LabError> {
    match (&src.preset, &src.config) {
        (Some(name), _) => presets::load(name),
        (None, Some(path)) => Scenario::from_path(path),
        (None, None) => unreachable!("clap requires one of them"),
    }
}

fn print_report(r: &RunReport) {
    for c in &r.results.checks {
        println!("{c}");
    }
    if let Some(dir) = r.artifacts.first().and_then(|p| p.parent()) {
        println!("wrote {} files to {}", r.artifacts.len(), dir.display());
    }
}

fn exit(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, LabError> {
    match command {
        Command::Run(src) => {
            let r = run_loaded(&load(&src)?, src.out.as_deref())?;
            print_report(&r);
            Ok(exit(r.passed()))
        }
        Command::Sweep(src) => {
            let r = sweep_loaded(&load(&src)?, src.out.as_deref())?;
            print_report(&r);
            Ok(exit(r.passed()))
        }
        Command::Verify { workers, only, out, velocity_scale, seed } => {
            let mut opts = VerifyOptions { only, ..Default::default() };
            if let Some(w) = workers {
                opts.workers = w;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            opts.dynamics.velocity_scale = velocity_scale;
            let report = verify_all(&opts)?;
            for c in &report.criteria {
                println!("{}", c.summary());
            }
            if let Some(dir) = out {
                write_verify(&dir, &report)?;
            }
            Ok(exit(report.passed()))
        }
        Command::Presets { show: Some(name) } => {
            print!("{}", presets::source(&name)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets { show: None } => {
            for name in presets::names() {
                println!("{name:<20} {}", presets::summary(name)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { run_dir, out } => {
            for p in export(&run_dir, out.as_deref())? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_verify(dir: &Path, report: &nsbohm_lab::VerifyReport) -> Result<(), LabError> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let csv = dir.join("verify.csv");
    std::fs::write(&csv, report.table_csv()?).map_err(|e| LabError::io(&csv, e))?;
    let json = dir.join("verify.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| LabError::io(&json, e))?;
    Ok(())
}
