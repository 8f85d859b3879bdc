use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "gvfield", version, about = "Gaussian vector fields on manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one prior vector field and write it on a grid.
    SamplePrior,
    /// Learn pendulum dynamics with the cylinder and flat kernels.
    Pendulum,
    /// Wind interpolation from a track (synthetic or from CSV files).
    Wind,
    /// Run the invariant suite and print a table.
    Check,
}

#[derive(Args, Debug)]
struct Flags {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    manifold: Option<String>,
    #[arg(long, global = true)]
    kernel: Option<String>,
    /// One value, or a comma-separated value per factor.
    #[arg(long, global = true)]
    lengthscale: Option<String>,
    #[arg(long, global = true)]
    amplitude: Option<f64>,
    #[arg(long, global = true)]
    truncation: Option<usize>,
    #[arg(long, global = true)]
    synthetic: bool,
    #[arg(long, global = true)]
    seeds: Option<usize>,
}

/// How a run failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Numeric(m) => write!(f, "numerical failure: {m}"),
            Failure::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<gvfield::GvfError> for Failure {
    fn from(e: gvfield::GvfError) -> Self {
        use gvfield::GvfError as E;
        let message = e.to_string();
        match e {
            E::Io { .. } => Failure::Io(message),
            E::Config(_) | E::Domain(_) | E::Shape { .. } | E::Capability(_) | E::Format { .. } => {
                Failure::Validation(message)
            }
            E::Conditioning { .. } | E::Optimization { .. } | E::Divergence { .. } | E::Gauge { .. } | E::State(_) => {
                Failure::Numeric(message)
            }
        }
    }
}

fn merged_config(flags: &Flags) -> Result<RunConfig, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = &flags.out {
        cfg.set("out", v.display());
    }
    if let Some(v) = &flags.manifold {
        cfg.set("manifold", v);
    }
    if let Some(v) = &flags.kernel {
        cfg.set("kernel", v);
    }
    if let Some(v) = &flags.lengthscale {
        cfg.set("lengthscale", v);
    }
    if let Some(v) = flags.amplitude {
        cfg.set("amplitude", v);
    }
    if let Some(v) = flags.truncation {
        cfg.set("truncation", v);
    }
    if flags.synthetic {
        cfg.set("synthetic", true);
    }
    if let Some(v) = flags.seeds {
        cfg.set("seeds", v);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = merged_config(&cli.flags)?;
    match cli.command {
        Command::SamplePrior => commands::sample_prior(&cfg),
        Command::Pendulum => commands::pendulum(&cfg),
        Command::Wind => commands::wind(&cfg),
        Command::Check => commands::check(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gvfield: {e}");
            ExitCode::from(e.code())
        }
    }
}
