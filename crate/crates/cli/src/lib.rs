//! `switchlab` experiment runner.
//!
//! Each subcommand reads a JSON config, runs one task and writes its artifacts
//! plus `manifest.json` into the output directory.

pub mod config;
pub mod output;
pub mod tasks;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig, Overrides, TaskKind};
use crate::output::{sha256_hex, Manifest, OutDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numeric(_) => EXIT_NUMERIC,
            Failure::Io(_) => EXIT_IO,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Numeric(e) | Failure::Io(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "switchlab",
    version,
    about = "Simulation and verification runs for path-dependent switching diffusions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paths and write the first trajectory and its jump log.
    Simulate(Common),
    /// Check a Lyapunov drift inequality on sampled segments.
    Scan(Common),
    /// Monte-Carlo check of the Dynkin identity.
    Dynkin(Common),
    /// First hitting times of a target set.
    Hitting(Common),
    /// Total-variation decay between two starting points.
    Tv(Common),
    /// Mean exit time from an interval via the coupled elliptic system.
    ExitTime(Common),
    /// Recurrence verdict from exterior boundary-value problems.
    Recurrence(Common),
}

impl Command {
    pub fn task(&self) -> TaskKind {
        match self {
            Command::Simulate(_) => TaskKind::Simulate,
            Command::Scan(_) => TaskKind::LyapunovScan,
            Command::Dynkin(_) => TaskKind::Dynkin,
            Command::Hitting(_) => TaskKind::Hitting,
            Command::Tv(_) => TaskKind::TvDecay,
            Command::ExitTime(_) => TaskKind::ExitTime,
            Command::Recurrence(_) => TaskKind::Recurrence,
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Scan(c)
            | Command::Dynkin(c)
            | Command::Hitting(c)
            | Command::Tv(c)
            | Command::ExitTime(c)
            | Command::Recurrence(c) => c,
        }
    }
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON)
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Master seed [config: seed, default 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Time step [config: dt, default 1e-3]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Worker threads; output does not depend on it [config: threads, default 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory [config: out, default ./out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, dt: self.dt, threads: self.threads, out: self.out.clone() }
    }
}

/// Loads the config named on the command line and applies the overrides.
pub fn load_config(task: TaskKind, common: &Common) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))
        .map_err(Failure::Config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if cfg.task() != task {
        return Err(ConfigError {
            path: "task".into(),
            message: format!("config is for `{}`, not `{}`", cfg.task().name(), task.name()),
        }
        .into());
    }
    cfg.apply(&common.overrides())?;
    Ok(cfg)
}

/// Runs a parsed config. `base` resolves relative model files. Always attempts
/// to leave a manifest, marked `failed` when the task did not finish.
pub fn execute(cfg: &ExperimentConfig, base: &Path) -> Result<Manifest, Failure> {
    let started = Instant::now();
    let canonical = cfg.to_json();
    let mut out = OutDir::create(&cfg.out).map_err(Failure::Io)?;
    let result = cfg.model.load(base).map_err(Failure::from).and_then(|model| tasks::run_task(cfg, &model, &mut out));
    let mut manifest = Manifest {
        tool: "switchlab",
        version: env!("CARGO_PKG_VERSION"),
        core_version: switchlab_core::VERSION,
        task: cfg.task().name(),
        seed: cfg.seed,
        threads: cfg.threads,
        config_sha256: sha256_hex(canonical.as_bytes()),
        config: serde_json::from_str(&canonical).expect("canonical config is JSON"),
        wall_time_s: started.elapsed().as_secs_f64(),
        status: if result.is_ok() { "ok" } else { "failed" },
        error: result.as_ref().err().map(|e| format!("{:#}", e.error())),
        files: out.written().to_vec(),
    };
    manifest.files.push("manifest.json".into());
    out.write_json("manifest.json", &manifest).map_err(Failure::Io)?;
    result.map(|()| manifest)
}

/// Entry point behind the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let common = cli.command.common();
    let outcome = load_config(cli.command.task(), common).and_then(|cfg| {
        let base = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
        execute(&cfg, &base)
    });
    match outcome {
        Ok(m) => {
            eprintln!("{}: ok in {:.3}s, wrote {}", m.task, m.wall_time_s, m.files.join(", "));
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.exit_code()
        }
    }
}
