use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swarmfield::diagnostics::trailing_mean;
use swarmfield::experiment::STEADY_WINDOW;
use swarmfield::validate::run_validation;
use swarmfield::{run_experiment, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "swarmfield", version, about = "Mean-field density control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant and oracle checks.
    Validate,
    /// Steady tracking error of the perfect-feedback loop per injected error size.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(path: &Path, overrides: &[(&str, String)]) -> Result<ExperimentConfig, String> {
    let mut config = ExperimentConfig::from_file(path).map_err(|e| e.to_string())?;
    for (key, value) in overrides {
        config = config.with_override(key, value).map_err(|e| e.to_string())?;
    }
    config.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(config)
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut overrides = Vec::new();
    if let Some(seed) = seed {
        overrides.push(("seed", seed.to_string()));
    }
    if let Some(out) = out {
        overrides.push(("output.dir", out.display().to_string()));
    }
    let config = match load(&config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let log = match run_experiment(&config) {
        Ok(log) => log,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    if config.mode == Mode::IssSweep {
        print_sweep(&log.sweep);
    } else {
        if config.output_dir.is_none() {
            print!("{}", log.metrics_csv());
        }
        if let (Some(first), Some(last)) = (log.rows.first(), log.rows.last()) {
            let track: Vec<f64> = log.rows.iter().map(|r| r.err_track).collect();
            eprintln!(
                "{} steps, err_track {:.4e} -> {:.4e} (trailing mean {:.4e})",
                log.rows.len() - 1,
                first.err_track,
                last.err_track,
                trailing_mean(&track, STEADY_WINDOW)
            );
        }
    }
    if let Some(dir) = &config.output_dir {
        eprintln!("wrote {} snapshots to {}", log.snapshots.len(), dir.display());
    }
    eprintln!("wall time {:.1} s", log.wall_time.as_secs_f64());
    ExitCode::SUCCESS
}

fn print_sweep(rows: &[(f64, f64)]) {
    println!("delta,steady_error");
    for (d, e) in rows {
        println!("{d},{e:.6e}");
    }
}

fn sweep(config: PathBuf, deltas: Vec<f64>, out: Option<PathBuf>) -> ExitCode {
    let list = deltas.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let mut overrides = vec![("mode", "iss_sweep".to_string()), ("iss.deltas", list)];
    if let Some(out) = out {
        overrides.push(("output.dir", out.display().to_string()));
    }
    match load(&config, &overrides) {
        Ok(c) => run_loaded(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run_loaded(config: ExperimentConfig) -> ExitCode {
    match run_experiment(&config) {
        Ok(log) => {
            print_sweep(&log.sweep);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn validate() -> ExitCode {
    let checks = run_validation();
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::Validate => validate(),
        Command::Sweep { config, deltas, out } => sweep(config, deltas, out),
    }
}
