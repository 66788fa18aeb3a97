//! `irs-vlp`: scenario validation, channel and bound evaluation, and the
//! Monte-Carlo experiments, writing plot-ready CSV/JSON.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irs_vlp::config::Profile;
use irs_vlp::geometry::Vec3;

#[derive(Debug, Parser)]
#[command(
    name = "irs-vlp",
    version,
    about = "RSS positioning with wall-mounted mirror arrays"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Scenario JSON; omitted fields take their defaults.
    #[arg(long, global = true, env = "IRS_VLP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the scenario.
    #[arg(long, global = true, env = "IRS_VLP_SEED")]
    pub seed: Option<u64>,
    /// Problem size when the scenario does not set one.
    #[arg(long, global = true, env = "IRS_VLP_PROFILE")]
    pub profile: Option<Profile>,
    /// Output directory. Without it results go to stdout and no manifest is
    /// written.
    #[arg(long, global = true, env = "IRS_VLP_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "IRS_VLP_THREADS")]
    pub threads: Option<usize>,
    /// Quadrature nodes per element side.
    #[arg(long, global = true, env = "IRS_VLP_QUADRATURE")]
    pub quadrature: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resolve and validate the scenario.
    Validate,
    /// Channel gains and mean received powers at one position.
    Channel {
        /// Receiver position `x,y,z` (default: the scenario's receiver).
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        x: Option<Vec3>,
        /// Use the fixed mismatch realization at this level instead of the
        /// assumed orientations.
        #[arg(long)]
        k: Option<f64>,
        /// Include the per-element gains.
        #[arg(long)]
        elements: bool,
    },
    /// Compare analytic gain derivatives with finite differences.
    Derivcheck {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Mismatch level of the true orientations that alternate with the
        /// assumed ones.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
    },
    /// Estimate the receiver position from measured or simulated powers.
    Estimate {
        /// Measured powers, one per LED, W. Simulated at `--x` when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        power: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        x: Option<Vec3>,
        /// Mismatch level of the simulated channel.
        #[arg(long, default_value_t = 0.0)]
        k: f64,
        /// Estimate with the true orientations instead of the assumed ones.
        #[arg(long)]
        matched: bool,
        /// Noise variance for every LED, W².
        #[arg(long)]
        sigma2: Option<f64>,
    },
    /// Pseudo-true position under the fixed mismatch realization.
    Pseudotrue {
        #[arg(long, default_value_t = 1.0)]
        k: f64,
    },
    /// MCRB, LB and CRB under the fixed mismatch realization.
    Bounds {
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long)]
        sigma2: Option<f64>,
    },
    /// RMSE against mismatch level, orientations redrawn per trial.
    RmseVsK(Sweep),
    /// RMSE and bounds against noise level, one realization per k.
    RmseVsNoise(Sweep),
}

#[derive(Debug, Args)]
pub struct Sweep {
    /// Mismatch levels, radians (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<f64>>,
    /// Noise variances, W² (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Channel { .. } => "channel",
            Command::Derivcheck { .. } => "derivcheck",
            Command::Estimate { .. } => "estimate",
            Command::Pseudotrue { .. } => "pseudotrue",
            Command::Bounds { .. } => "bounds",
            Command::RmseVsK(_) => "rmse-vs-k",
            Command::RmseVsNoise(_) => "rmse-vs-noise",
        }
    }
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {} values", v.len())),
    }
}

/// Exit statuses. Usage errors exit with 2 (from the argument parser).
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const CHECK_FAILED: u8 = 5;
    pub const IO: u8 = 6;
}

/// A check ran to completion but its result is outside tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use irs_vlp::Error as E;
    if err.downcast_ref::<CheckFailed>().is_some() {
        return exit::CHECK_FAILED;
    }
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(
            E::InvalidScene(_)
            | E::GridOverflow { .. }
            | E::NotPerfectSquare(_)
            | E::OrientationCount { .. }
            | E::MeasurementCount { .. }
            | E::Config(_)
            | E::Empty(_)
            | E::Json(_),
        ) => exit::CONFIG,
        Some(
            E::Coincident(..)
            | E::Degenerate(_)
            | E::ClampBoundary { .. }
            | E::IllConditioned { .. }
            | E::SingularFim { .. },
        ) => exit::NUMERICAL,
        Some(E::Io(_)) => exit::IO,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => exit::IO,
        None => exit::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
