//! `hamlearn`: synthetic experiments, estimation, fitting and reports.

mod commands;
mod error;
mod files;
mod parallel;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, EXIT_VALIDATION};

#[derive(Parser, Debug)]
#[command(name = "hamlearn", version, about = "Learn long-range Ising Hamiltonians from quench data")]
pub struct Cli {
    /// Seed for every stochastic step; required by generate, estimate --test-fraction,
    /// epsilon, validate with random sets, and report.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for commands that run independent fits.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON object of flag defaults for the subcommand; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a single-shot dataset (JSON lines).
    Generate(GenerateArgs),
    /// Filter, correct and estimate magnetizations and correlations.
    Estimate(EstimateArgs),
    /// Fit couplings, amplitudes, decoherence rates or fields.
    Fit(FitArgs),
    /// Staged trap-potential fit from positions and mode data.
    PhononFit(PhononFitArgs),
    /// Theory couplings from modes, tones and amplitudes.
    Couplings(CouplingsArgs),
    /// Precision ε between two coupling sets.
    Epsilon(EpsilonArgs),
    /// Compare predicted k-body correlations with data.
    Validate(ValidateArgs),
    /// Figure-data tables from a directory of artifacts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Model file (couplings in rad/ms).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Shots per time point, alternating between the two readout groups.
    #[arg(long)]
    pub shots: usize,
    /// Evolution times in ms; default 0, 0.75, …, 9.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Evolution without the mid-sequence π pulse.
    #[arg(long)]
    pub no_echo: bool,
    /// Per-ion, per-shot readout flip probability.
    #[arg(long, default_value_t = 0.0)]
    pub spam: f64,
    /// Leakage rate in 1/ms, the same for all ions.
    #[arg(long, default_value_t = 0.0)]
    pub leak_rate: f64,
    /// Decoherence file; overrides --gamma-cor/--gamma-ind.
    #[arg(long)]
    pub decoherence: Option<PathBuf>,
    /// Uniform correlated dephasing rate (rad/ms).
    #[arg(long, default_value_t = 0.0)]
    pub gamma_cor: f64,
    /// Uniform independent dephasing rate (rad/ms).
    #[arg(long, default_value_t = 0.0)]
    pub gamma_ind: f64,
    /// Crystal reconfiguration `first:last:i,j,…` over global trial indices.
    #[arg(long)]
    pub config_change: Vec<String>,
    /// Full error-channel JSON; replaces every channel flag above.
    #[arg(long)]
    pub channels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Observable set (training half when --test-fraction is given).
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the cooling-check configuration filter.
    #[arg(long)]
    pub no_filter: bool,
    /// Skip the leakage correction.
    #[arg(long)]
    pub no_leakage: bool,
    /// Hold out this fraction of each time point's shots as a test set.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, requires = "test_fraction")]
    pub test_out: Option<PathBuf>,
    /// Leakage estimate (per-time probabilities and fitted rates).
    #[arg(long)]
    pub leakage_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    /// All n(n−1)/2 couplings.
    On2,
    /// Per-tone, per-ion amplitudes on calibrated modes.
    On,
    /// Theory couplings, evaluated without fitting.
    O1,
    /// Correlated and independent dephasing rates from J = 0 data.
    Decoherence,
    /// Longitudinal fields from data without the echo.
    Fields,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub scheme: Scheme,
    /// Training observables.
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out observables, evaluated after every step.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Decoherence rates (file or decoherence fit result).
    #[arg(long)]
    pub decoherence: Option<PathBuf>,
    /// Starting couplings (model or fit result); for `fields`, the known couplings.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub modes: Option<PathBuf>,
    #[arg(long)]
    pub tones: Option<PathBuf>,
    /// Per-tone amplitudes `[[Ω_i], …]` in rad/ms.
    #[arg(long)]
    pub amplitudes: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Relative RSS decrease that ends the fit.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Weight residuals by inverse standard errors.
    #[arg(long)]
    pub weighted: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Learning curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhononFitArgs {
    /// Positions (scaled units), measured frequencies by rank and sideband patterns.
    #[arg(long)]
    pub data: PathBuf,
    /// Replace the positions with a camera CSV (`ion,x_um,z_um`).
    #[arg(long)]
    pub positions_csv: Option<PathBuf>,
    /// Length unit in μm used to scale the CSV.
    #[arg(long, default_value_t = 1.0)]
    pub length_um: f64,
    /// Starting potential; default is a force-balance harmonic guess.
    #[arg(long)]
    pub start: Option<PathBuf>,
    /// Transverse trap frequency (rad/ms) for the harmonic guess.
    #[arg(long)]
    pub omega_y: Option<f64>,
    /// Frequency unit of the scaled mechanics (rad/ms).
    #[arg(long, default_value_t = 1.0)]
    pub scale_frequency: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Transverse modes of the fitted potential.
    #[arg(long)]
    pub modes_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CouplingsArgs {
    #[arg(long, conflicts_with = "potential")]
    pub modes: Option<PathBuf>,
    /// Trap potential; modes are computed at the equilibrium nearest --positions-csv.
    #[arg(long, requires = "positions_csv")]
    pub potential: Option<PathBuf>,
    #[arg(long)]
    pub positions_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub length_um: f64,
    #[arg(long)]
    pub tones: PathBuf,
    #[arg(long)]
    pub amplitudes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub modes_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EpsilonArgs {
    /// First coupling set (model or fit result).
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = hamlearn::metrics::DEFAULT_CONFIGS)]
    pub configs: usize,
    #[arg(long, default_value_t = hamlearn::metrics::DEFAULT_REPEATS)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Fitted couplings (model or fit result).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub decoherence: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Explicit index sets, `0,1,2;3,4,5,6`.
    #[arg(long, conflicts_with = "k")]
    pub sets: Option<String>,
    /// Orders for randomly drawn index sets.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub k: Vec<usize>,
    /// Random sets per order.
    #[arg(long, default_value_t = 1)]
    pub per_k: usize,
    #[arg(long, default_value_t = 4.0)]
    pub max_z: f64,
    #[arg(long, default_value_t = 0.9)]
    pub min_fraction: f64,
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub no_leakage: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding data.jsonl, decoherence.json, init.json, fit_on.json and
    /// amplitudes.json.
    #[arg(long)]
    pub dir: PathBuf,
    /// Output directory for the CSV tables and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Shots per time point for the scaling tables.
    #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000,4000")]
    pub sizes: Vec<usize>,
    /// Upper limit on disjoint pairs per size in the ε table.
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub test_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = hamlearn::metrics::DEFAULT_CONFIGS)]
    pub configs: usize,
    #[arg(long, default_value_t = hamlearn::metrics::DEFAULT_REPEATS)]
    pub repeats: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

const SUBCOMMANDS: [&str; 8] = [
    "generate",
    "estimate",
    "fit",
    "phonon-fit",
    "couplings",
    "epsilon",
    "validate",
    "report",
];

/// Path given to `--config`, if any, found before clap runs.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Turns a JSON object into flags: `true` → `--key`, `false`/`null` → nothing,
/// arrays → comma-joined, `_` in keys → `-`.
/// Config entries as flags, skipping any flag in `explicit`.
pub fn config_flags(config: &serde_json::Value, explicit: &[String]) -> Result<Vec<OsString>, CliError> {
    let obj = config
        .as_object()
        .ok_or_else(|| CliError::validation("config file must hold a JSON object"))?;
    let scalar = |v: &serde_json::Value| -> Result<String, CliError> {
        match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            other => Err(CliError::validation(format!("unsupported config value {other}"))),
        }
    };
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        if explicit.contains(&flag) {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
                out.push(flag.into());
                out.push(joined.into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Splices config flags in right after the subcommand; flags given on the
/// command line replace their config entries.
fn with_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let config: serde_json::Value = files::read_json(&path)?;
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let explicit: Vec<String> = args[pos + 1..]
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_owned())
        .collect();
    let flags = config_flags(&config, &explicit)?;
    let mut merged = args[..=pos].to_vec();
    merged.extend(flags);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(merged)
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("error: {err}");
    eprintln!("{}", err.to_json());
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let args = match with_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
