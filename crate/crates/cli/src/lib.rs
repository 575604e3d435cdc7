//! Command line front end: configuration, orchestration and output files.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use thiserror::Error;

use config::ExperimentConfig;
use output::{write_atomic, Failure, Outputs, RunManifest, MANIFEST};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("invalid configuration at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("numerical failure ({kind}): {detail}")]
    Numerical {
        kind: String,
        detail: String,
        stage: Option<u32>,
        condition: Option<f64>,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => EXIT_CONFIG,
            RunError::Numerical { .. } => EXIT_NUMERICAL,
            RunError::Io(_) => EXIT_IO,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Solve,
    Sweep,
    Spectral,
    Wegner,
    ThetaScan,
    Dioph,
    Evolve,
    Compare,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Spectral => "spectral",
            Command::Wegner => "wegner",
            Command::ThetaScan => "theta-scan",
            Command::Dioph => "dioph",
            Command::Evolve => "evolve",
            Command::Compare => "compare",
            Command::Bench => "bench",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dnls", version, about = "Quasi-periodic solutions of the random discrete NLS")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML configuration file; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides `threads` from the configuration.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Configuration after file loading and flag overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RunError::Config { key: "--config".into(), msg: format!("{}: {e}", path.display()) })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate_common()?;
    Ok(cfg)
}

fn dispatch(command: Command, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), RunError> {
    match command {
        Command::Solve => commands::solve_cmd(cfg, out),
        Command::Sweep => commands::sweep_cmd(cfg, out),
        Command::Spectral => commands::spectral_cmd(cfg, out),
        Command::Wegner => commands::wegner_cmd(cfg, out),
        Command::ThetaScan => commands::theta_scan_cmd(cfg, out),
        Command::Dioph => commands::dioph_cmd(cfg, out),
        Command::Evolve => commands::evolve_cmd(cfg, out),
        Command::Compare => commands::compare_cmd(cfg, out),
        Command::Bench => commands::bench_cmd(cfg, out),
    }
}

/// Run one command; returns the manifest on success or numerical failure.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<RunManifest, RunError> {
    let start = Instant::now();
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| RunError::Config { key: "threads".into(), msg: e.to_string() })?;
    let mut out = Outputs::new(dir)?;
    let result = pool.install(|| dispatch(command, cfg, &mut out));
    let failure = match &result {
        Ok(()) => None,
        Err(RunError::Numerical { kind, detail, stage, condition }) => Some(Failure {
            kind: kind.clone(),
            detail: detail.clone(),
            stage: *stage,
            condition: *condition,
        }),
        Err(e) => return Err(e.clone()),
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        status: if failure.is_some() { "numerical_failure".into() } else { "ok".into() },
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        summary: out.summary.clone(),
        failure,
        files: out.files.clone(),
        timings: out.timings.clone(),
        config: toml::from_str(&cfg.snapshot()).expect("snapshot parses"),
    };
    let text = toml::to_string(&manifest).map_err(|e| RunError::Io(e.to_string()))?;
    write_atomic(&out.dir, MANIFEST, text.as_bytes())?;
    match result {
        Ok(()) => Ok(manifest),
        Err(e) => Err(e),
    }
}

/// Parse-free entry point used by `main`: returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let outcome = load_config(cli).and_then(|cfg| execute(cli.command, &cfg));
    match outcome {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("dnls: {e}");
            e.exit_code()
        }
    }
}
