//! `upsilon run` executes an experiment config; `upsilon plot` draws a results CSV.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use upsilon::experiment::{self, plot, ExperimentConfig};
use upsilon::Error;

/// Caps the worker count of `run`, whatever `--workers` asks for.
const THREAD_CAP_VAR: &str = "UPSILON_MAX_THREADS";

#[derive(Debug, Parser)]
#[command(name = "upsilon", version, about = "Class-mismatch pseudo-labeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write results.csv, plots/ and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Parallel experiment cells; defaults to the available cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; overrides `experiment.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw mean curves with +-1 std bands from a results CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// TOML file with `x`, `y` and optional `series`, `title`, `x_label`, `y_label`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn resolve_workers(requested: Option<usize>, cap: Option<&str>) -> Result<usize, Failure> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut workers = requested.unwrap_or(available);
    if workers == 0 {
        return Err(Failure::Config("--workers must be >= 1".into()));
    }
    if let Some(cap) = cap {
        let cap: usize = cap
            .trim()
            .parse()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| Failure::Config(format!("{THREAD_CAP_VAR} must be a positive integer, got `{cap}`")))?;
        workers = workers.min(cap);
    }
    Ok(workers)
}

fn run(config: &Path, workers: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let bytes = std::fs::read(config).map_err(|e| Failure::Config(format!("cannot read {}: {e}", config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::Config(format!("{} is not UTF-8", config.display())))?;
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    let out = out
        .or_else(|| cfg.experiment.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Config(format!("output directory {} is not writable: {e}", out.display())))?;
    let workers = resolve_workers(workers, std::env::var(THREAD_CAP_VAR).ok().as_deref())?;
    let summary = experiment::run(&cfg, Some(&bytes), &out, Some(workers)).map_err(|e| match e {
        Error::InvalidConfig(m) => Failure::Config(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    println!("wrote {} rows to {}", summary.rows.len(), summary.results.display());
    println!("wrote {}", summary.manifest.display());
    for p in &summary.plots {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn plot(csv: &Path, spec: &Path, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec).map_err(|e| Failure::Config(format!("cannot read {}: {e}", spec.display())))?;
    let spec = plot::PlotSpec::from_toml_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    plot::plot_file(csv, &spec, out).map_err(|e| match e {
        Error::Io(_) => Failure::Runtime(e.to_string()),
        other => Failure::Config(other.to_string()),
    })?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, workers, out } => run(&config, workers, out),
        Command::Plot { csv, spec, out } => plot(&csv, &spec, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("runtime error: {m}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_limits_workers() {
        assert_eq!(resolve_workers(Some(8), Some("3")).ok(), Some(3));
        assert_eq!(resolve_workers(Some(2), Some("3")).ok(), Some(2));
        assert_eq!(resolve_workers(Some(5), None).ok(), Some(5));
        assert!(resolve_workers(Some(2), Some("zero")).is_err());
        assert!(resolve_workers(Some(0), None).is_err());
    }
}
