//! Experiment harness for `mmparareal`: command-line parsing, configuration
//! and the CSV-producing experiments.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod config;
pub mod experiments;

use config::{parse_config_text, Experiment, ExperimentConfig, RawConfig};
use experiments::Mutation;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("selftest failed: {}", .failed.join(", "))]
    Selftest { failed: Vec<String>, report: Vec<String> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmparareal", version, about = "Micro-macro Parareal experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Slow-error bounds against measured errors for the two-scale ODE.
    OdeConvergence,
    /// Monte Carlo against moment-model trajectories of the SDE.
    SdeMoments,
    /// Monte Carlo-moments Parareal errors and iterates.
    SdeParareal,
    /// Fast invariant checks.
    Selftest,
}

impl Command {
    pub fn experiment(self) -> Experiment {
        match self {
            Command::OdeConvergence => Experiment::OdeConvergence,
            Command::SdeMoments => Experiment::SdeMoments,
            Command::SdeParareal => Experiment::SdeParareal,
            Command::Selftest => Experiment::Selftest,
        }
    }
}

/// Overrides for the config file. Lists are comma separated.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub alpha: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub delta: Option<Vec<f64>>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha_bar: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub zeta_perturb: Option<f64>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub n_slabs: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub t_final: Option<f64>,
    #[arg(long, global = true)]
    pub particles: Option<usize>,
    #[arg(long, global = true)]
    pub inner_dt: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub sigma: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Flat `key=value` file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Scales every bound in the selftest domination check.
    #[arg(long, global = true, hide = true)]
    pub mutate_bound_scale: Option<f64>,
}

impl Flags {
    fn overrides(&self) -> RawConfig {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut raw = RawConfig::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                raw.insert(k.to_string(), v);
            }
        };
        put("alpha", self.alpha.as_deref().map(list));
        put("beta", self.beta.as_deref().map(list));
        put("delta", self.delta.as_deref().map(list));
        put("alpha_bar", self.alpha_bar.map(|v| v.to_string()));
        put("zeta_perturb", self.zeta_perturb.map(|v| v.to_string()));
        put("dt", self.dt.map(|v| v.to_string()));
        put("n_slabs", self.n_slabs.map(|v| v.to_string()));
        put("iters", self.iters.map(|v| v.to_string()));
        put("t_final", self.t_final.map(|v| v.to_string()));
        put("particles", self.particles.map(|v| v.to_string()));
        put("inner_dt", self.inner_dt.map(|v| v.to_string()));
        put("sigma", self.sigma.as_deref().map(list));
        put("seed", self.seed.map(|v| v.to_string()));
        put("reps", self.reps.map(|v| v.to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        put("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        raw
    }
}

/// Config file values overridden by flags, then defaults for `experiment`.
pub fn resolve(experiment: Experiment, flags: &Flags) -> Result<ExperimentConfig, CliError> {
    let mut raw = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config_text(&text)?
        }
        None => RawConfig::new(),
    };
    raw.extend(flags.overrides());
    ExperimentConfig::resolve(experiment, &raw)
}

/// Runs one invocation and returns the lines to print.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    let experiment = cli.command.experiment();
    let config = resolve(experiment, &cli.flags)?;
    let wrote = |paths: Vec<PathBuf>| paths.iter().map(|p| format!("wrote {}", p.display())).collect();
    match experiment {
        Experiment::OdeConvergence => Ok(wrote(experiments::run_ode_convergence(&config)?)),
        Experiment::SdeMoments => Ok(wrote(experiments::run_sde_moments(&config)?)),
        Experiment::SdeParareal => Ok(wrote(experiments::run_sde_parareal(&config)?)),
        Experiment::Selftest => {
            let mutation = Mutation {
                bound_scale: cli.flags.mutate_bound_scale.unwrap_or(1.0),
            };
            let (checks, _) = experiments::run_selftest(&config, mutation)?;
            let lines: Vec<String> = checks
                .iter()
                .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
                .collect();
            let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect();
            if failed.is_empty() {
                Ok(lines)
            } else {
                Err(CliError::Selftest { failed, report: lines })
            }
        }
    }
}

/// Parses `args` (program name first) and runs, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            if let CliError::Selftest { report, .. } = &e {
                report.iter().for_each(|l| println!("{l}"));
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
