use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opaug_cli::config::Config;
use opaug_cli::experiments::{self, with_threads, RunError};
use opaug_cli::output;

#[derive(Parser)]
#[command(name = "opaug", version, about = "Operator-augmented policy evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; overrides `output` in the config. Defaults to stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// One CSV row per (cell, n, realization).
    Sweep { config: PathBuf },
    /// Normalized naive vs augmented error, one row per cell.
    Scatter { config: PathBuf },
    /// Every quantity for a single instance.
    Diagnose { config: PathBuf },
    /// Closed-form bounds and their checks per cell.
    Bounds { config: PathBuf },
}

enum Failure {
    Config(String),
    Degenerate(String),
    Io(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => Failure::Config(m),
            RunError::Numeric(e) => Failure::Degenerate(e.to_string()),
            RunError::Io(e) => Failure::Io(e.to_string()),
        }
    }
}

fn open_output(path: Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => {
            let f = File::create(&p).map_err(|e| Failure::Io(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = match &cli.command {
        Command::Sweep { config } | Command::Scatter { config } | Command::Diagnose { config } | Command::Bounds { config } => config,
    };
    let mut cfg = Config::from_path(path).map_err(|e| match e {
        opaug_cli::ConfigError::Read { .. } => Failure::Io(e.to_string()),
        other => Failure::Config(other.to_string()),
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let target = cli.output.or_else(|| cfg.output.clone().map(PathBuf::from));
    let io_err = |e: io::Error| Failure::Io(e.to_string());
    match cli.command {
        Command::Sweep { .. } => {
            let records = with_threads(cli.threads, || experiments::run_sweep(&cfg))??;
            let mut out = open_output(target)?;
            output::write_sweep(&mut out, &cfg, &records).and_then(|_| out.flush()).map_err(io_err)?;
        }
        Command::Scatter { .. } => {
            let points = with_threads(cli.threads, || experiments::run_scatter(&cfg))??;
            let mut out = open_output(target)?;
            output::write_scatter(&mut out, &cfg, &points).and_then(|_| out.flush()).map_err(io_err)?;
        }
        Command::Bounds { .. } => {
            let records = with_threads(cli.threads, || experiments::run_bounds(&cfg))??;
            let mut out = open_output(target)?;
            output::write_bounds(&mut out, &cfg, &records).and_then(|_| out.flush()).map_err(io_err)?;
        }
        Command::Diagnose { .. } => {
            let d = with_threads(cli.threads, || experiments::diagnose(&cfg))??;
            let mut stdout = io::stdout().lock();
            for (k, v) in output::diagnosis_entries(&d) {
                writeln!(stdout, "{k:<22} {v}").map_err(io_err)?;
            }
            if let Some(p) = target {
                let mut out = open_output(Some(p))?;
                output::write_diagnosis(&mut out, &cfg, &d).and_then(|_| out.flush()).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Degenerate(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
