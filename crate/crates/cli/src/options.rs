use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

use lsdf::case::{builtin_case, NetworkCase};

use crate::exit;

/// A sample count, either absolute (`500`) or per bus (`20N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Count {
    Absolute(usize),
    PerBus(usize),
}

impl Count {
    pub fn resolve(self, n_buses: usize) -> usize {
        match self {
            Count::Absolute(k) => k,
            Count::PerBus(m) => m * n_buses,
        }
    }
}

impl FromStr for Count {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (digits, per_bus) = match s.strip_suffix(['N', 'n']) {
            Some("") => ("1", true),
            Some(d) => (d, true),
            None => (s, false),
        };
        let value: usize = digits.parse().map_err(|_| format!("`{s}` is not a count like 500 or 20N"))?;
        if value == 0 {
            return Err("count must be at least 1".into());
        }
        Ok(if per_bus { Count::PerBus(value) } else { Count::Absolute(value) })
    }
}

fn parse_range(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..1.0).contains(&r) {
        return Err(format!("R must satisfy 0 <= R < 1, got {r}"));
    }
    Ok(r)
}

/// Comma-separated counts, e.g. `N,2N,5N,10N`.
#[derive(Debug, Clone)]
pub struct Schedule(pub Vec<Count>);

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',').map(Count::from_str).collect::<Result<_, _>>().map(Schedule)
    }
}

#[derive(Args, Debug)]
pub struct CaseArg {
    /// Case file (MATPOWER `.m` or JSON) or a built-in case name such as `case30`.
    pub case: String,
    /// Directory receiving `samples/`, `factors/` and `reports/`.
    #[arg(long, default_value = "lsdf-out")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Load variation range: total load is drawn from [1-R, 1] of max-load.
    #[arg(long = "R", alias = "r", value_parser = parse_range)]
    pub r: f64,
    /// Number of scenarios, absolute or per bus (`20N`). Ignored with `--grid`.
    #[arg(long = "K", alias = "k", default_value = "20N")]
    pub k: Count,
    /// RNG seed (required for random sampling).
    #[arg(long, required_unless_present = "grid")]
    pub seed: Option<u64>,
    /// Hold the per-bus and per-generator jitter factors at 1.
    #[arg(long)]
    pub freeze_eta: bool,
    /// Enumerate a grid with this many load levels per load bus instead of sampling.
    #[arg(long, value_name = "POINTS")]
    pub grid: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PtdfArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// External id of the reference bus (defaults to the case slack).
    #[arg(long)]
    pub slack: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Sample file written by `lsdf sample`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Ridge penalty on the normal equations (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Sample file to score on.
    #[arg(long)]
    pub samples: PathBuf,
    /// Factor CSV written by `lsdf fit` (its `.json` sidecar must sit next to it).
    #[arg(long, required_unless_present = "ptdf", conflicts_with = "ptdf")]
    pub factors: Option<PathBuf>,
    /// Score the DC PTDF instead of a factor file.
    #[arg(long)]
    pub ptdf: bool,
    /// External id of the PTDF reference bus.
    #[arg(long, requires = "ptdf")]
    pub slack: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long = "R", alias = "r", value_parser = parse_range)]
    pub r: f64,
    /// Training scenarios, absolute or per bus (`20N`).
    #[arg(long = "K", alias = "k")]
    pub k: Count,
    /// Test scenarios (defaults to the training count).
    #[arg(long = "K-test", alias = "k-test")]
    pub k_test: Option<Count>,
    /// Seed of the training set.
    #[arg(long)]
    pub seed: u64,
    /// Seed of the test set (defaults to seed + 1).
    #[arg(long)]
    pub test_seed: Option<u64>,
    /// Histogram bin width for factor entries.
    #[arg(long, default_value_t = 0.05)]
    pub bin_width: f64,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long = "R", alias = "r", value_parser = parse_range)]
    pub r: f64,
    /// Ascending sample counts, e.g. `N,2N,5N,10N,20N`.
    #[arg(long, default_value = "N,2N,5N,10N,20N")]
    pub schedule: Schedule,
    /// Seed for the reference set and the subset draws.
    #[arg(long)]
    pub seed: u64,
    /// Size of the random reference set.
    #[arg(long, default_value = "50N", conflicts_with = "grid")]
    pub reference: Count,
    /// Use an enumerated grid with this many levels per load bus as the reference.
    #[arg(long, value_name = "POINTS")]
    pub grid: Option<usize>,
}

/// Loads a case from a path, falling back to the built-in cases.
pub fn load_case(name_or_path: &str) -> anyhow::Result<NetworkCase> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(NetworkCase::from_path(path)?);
    }
    match builtin_case(name_or_path) {
        Some(case) => Ok(case?),
        None => Err(exit(2, format!("no case file or built-in case named `{name_or_path}`"))),
    }
}

/// Filename fragment identifying a sampling run.
pub fn run_tag(case: &NetworkCase, r: f64, k: usize, seed: u64) -> String {
    format!("{}_R{r}_K{k}_seed{seed}", case.name())
}
