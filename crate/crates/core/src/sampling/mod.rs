//! Scenario generation: randomized load scaling followed by an AC solve.
//!
//! Per-bus demand is `max_load · η_A · η_i`, with one overall level
//! `η_A ~ U[1−R, 1]` per scenario and independent per-bus jitter
//! `η_i ~ U[1−j, 1+j]` (j = 0.05) on P and Q. Non-slack generators are
//! redispatched to follow the scaled total demand; each also gets its own
//! jitter before the group is renormalized to the target total, so
//! generator buses do not all move in lockstep. The slack bus takes the
//! residual plus losses.
//!
//! Each scenario index `k` owns the ChaCha8 stream `(seed, k)`. Within a
//! stream the draws are consumed in a fixed order per attempt: `η_A`,
//! then `(η_i^P, η_i^Q)` for every bus, then one factor per generator.
//! A non-converged attempt is rejected and the next draws of the same
//! stream are used, so results do not depend on thread scheduling.

mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acpf::{AcpfError, PowerFlowSolver, SolverOptions};
use crate::case::NetworkCase;

pub use store::{read_sample_set, write_sample_set};

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("load variation range R = {0} must satisfy 0 <= R < 1")]
    InvalidRange(f64),
    #[error("sample count must be at least 1")]
    ZeroCount,
    #[error("training and test sets need distinct seeds (both {0})")]
    SameSeed(u64),
    #[error("rejected {rejected} of {attempts} power flow attempts; R is too large for this case")]
    RejectionRate { rejected: usize, attempts: usize },
    #[error("scenario {index} failed to converge in {attempts} attempts")]
    Exhausted { index: usize, attempts: usize },
    #[error("grid enumeration supports at most {max} load buses, case has {count}")]
    TooManyLoadBuses { count: usize, max: usize },
    #[error("grid enumeration needs at least 2 points per load")]
    TooFewPoints,
    #[error("grid of {size} scenarios exceeds the limit of {max}")]
    GridTooLarge { size: u128, max: u128 },
    #[error(transparent)]
    Solver(#[from] AcpfError),
    #[error("sample file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One converged scenario. `p_branch` is ordered `[from-ends | to-ends]`.
/// The voltage and load vectors are diagnostics and are empty for sets
/// read back from a sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub index: usize,
    pub eta_a: f64,
    pub p_inj: Vec<f64>,
    pub p_branch: Vec<f64>,
    pub v_mag: Vec<f64>,
    pub theta: Vec<f64>,
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
}

impl Scenario {
    /// Sum of branch losses, MW.
    pub fn total_loss(&self) -> f64 {
        self.p_branch.iter().sum()
    }

    pub fn injection_sum(&self) -> f64 {
        self.p_inj.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingMethod {
    Random { jitter: f64 },
    Grid { points_per_load: usize },
}

/// A set of scenarios drawn from one case at one load variation range.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub scenarios: Vec<Scenario>,
    pub r: f64,
    pub seed: u64,
    pub method: SamplingMethod,
    pub case_name: String,
    pub case_hash: String,
    pub rejected_count: usize,
    pub n_buses: usize,
    pub n_branches: usize,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Copy holding only the scenarios at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            scenarios: indices.iter().map(|&i| self.scenarios[i].clone()).collect(),
            ..self.header_only()
        }
    }

    fn header_only(&self) -> SampleSet {
        SampleSet {
            scenarios: Vec::new(),
            r: self.r,
            seed: self.seed,
            method: self.method,
            case_name: self.case_name.clone(),
            case_hash: self.case_hash.clone(),
            rejected_count: self.rejected_count,
            n_buses: self.n_buses,
            n_branches: self.n_branches,
        }
    }
}

/// Knobs for random sampling. `jitter` is the half-width of the per-bus
/// and per-generator factors; 0 freezes them at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub r: f64,
    pub k: usize,
    pub seed: u64,
    pub jitter: f64,
    pub max_attempts: usize,
    /// Scenarios solved between rejection-rate checks.
    pub window: usize,
    pub solver: SolverOptions,
}

impl SamplingConfig {
    pub fn new(r: f64, k: usize, seed: u64) -> Self {
        SamplingConfig {
            r,
            k,
            seed,
            jitter: 0.05,
            max_attempts: 20,
            window: 64,
            solver: SolverOptions::default(),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.jitter = 0.0;
        self
    }
}

fn check_range(r: f64) -> Result<(), SamplingError> {
    if !(0.0..1.0).contains(&r) {
        return Err(SamplingError::InvalidRange(r));
    }
    Ok(())
}

/// Demand and dispatch for one draw.
struct Draw {
    eta_a: f64,
    load_p: Vec<f64>,
    load_q: Vec<f64>,
    gen_p: Vec<f64>,
}

/// Generator set-points following the scaled demand. `gen_factor[g]` is the
/// per-generator jitter (1.0 for none).
fn dispatch(case: &NetworkCase, load_p: &[f64], fallback_scale: f64, gen_factor: &[f64]) -> Vec<f64> {
    let total_max: f64 = case.buses().iter().map(|b| b.p_load_max).sum();
    let scale = if total_max != 0.0 {
        load_p.iter().sum::<f64>() / total_max
    } else {
        fallback_scale
    };
    let slack = case.slack_bus();
    let movable = |g: &crate::case::Generator| g.in_service && Some(g.bus) != slack;

    let mut gen_p = case.generator_setpoints();
    let mut nominal = 0.0;
    let mut jittered = 0.0;
    for (g, f) in case.generators().iter().zip(gen_factor) {
        if movable(g) {
            nominal += g.p_set;
            jittered += g.p_set * f;
        }
    }
    let renorm = if jittered != 0.0 { scale * nominal / jittered } else { 0.0 };
    for ((g, f), p) in case.generators().iter().zip(gen_factor).zip(gen_p.iter_mut()) {
        if movable(g) {
            *p = g.p_set * f * renorm;
        }
    }
    gen_p
}

fn draw(case: &NetworkCase, rng: &mut ChaCha8Rng, r: f64, jitter: f64) -> Draw {
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let eta_a = uniform(1.0 - r, 1.0);
    let mut load_p = Vec::with_capacity(case.n_buses());
    let mut load_q = Vec::with_capacity(case.n_buses());
    for bus in case.buses() {
        let eta_p = uniform(1.0 - jitter, 1.0 + jitter);
        let eta_q = uniform(1.0 - jitter, 1.0 + jitter);
        load_p.push(bus.p_load_max * eta_a * eta_p);
        load_q.push(bus.q_load_max * eta_a * eta_q);
    }
    let gen_factor: Vec<f64> = case
        .generators()
        .iter()
        .map(|_| uniform(1.0 - jitter, 1.0 + jitter))
        .collect();
    let gen_p = dispatch(case, &load_p, eta_a, &gen_factor);
    Draw { eta_a, load_p, load_q, gen_p }
}

/// Solves one draw; `Ok(None)` when the power flow does not converge.
fn solve_draw(
    solver: &PowerFlowSolver<'_>,
    index: usize,
    d: Draw,
) -> Result<Option<Scenario>, SamplingError> {
    let sol = match solver.solve(&d.load_p, &d.load_q, &d.gen_p) {
        Ok(sol) => sol,
        Err(AcpfError::SingularJacobian { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if !sol.converged {
        return Ok(None);
    }
    let p_branch = sol.branch_end_flows();
    Ok(Some(Scenario {
        index,
        eta_a: d.eta_a,
        p_inj: sol.p_inj,
        p_branch,
        v_mag: sol.v_mag,
        theta: sol.theta,
        load_p: d.load_p,
        load_q: d.load_q,
    }))
}

fn random_scenario(
    case: &NetworkCase,
    solver: &PowerFlowSolver<'_>,
    config: &SamplingConfig,
    index: usize,
) -> Result<(Scenario, usize), SamplingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    for attempt in 0..config.max_attempts {
        let d = draw(case, &mut rng, config.r, config.jitter);
        if let Some(s) = solve_draw(solver, index, d)? {
            return Ok((s, attempt));
        }
    }
    Err(SamplingError::Exhausted { index, attempts: config.max_attempts })
}

/// Draws `k` converged scenarios with load variation range `r`.
pub fn generate_samples(
    case: &NetworkCase,
    r: f64,
    k: usize,
    seed: u64,
) -> Result<SampleSet, SamplingError> {
    generate_samples_with(case, &SamplingConfig::new(r, k, seed))
}

pub fn generate_samples_with(
    case: &NetworkCase,
    config: &SamplingConfig,
) -> Result<SampleSet, SamplingError> {
    check_range(config.r)?;
    if config.k == 0 {
        return Err(SamplingError::ZeroCount);
    }
    let solver = PowerFlowSolver::with_options(case, config.solver)?;
    let mut scenarios = Vec::with_capacity(config.k);
    let mut rejected = 0;
    let window = config.window.max(1);
    for start in (0..config.k).step_by(window) {
        let end = (start + window).min(config.k);
        let batch: Vec<_> = (start..end)
            .into_par_iter()
            .map(|index| random_scenario(case, &solver, config, index))
            .collect();
        for result in batch {
            let (scenario, rejections) = result?;
            rejected += rejections;
            scenarios.push(scenario);
        }
        let attempts = scenarios.len() + rejected;
        if rejected * 2 > attempts {
            return Err(SamplingError::RejectionRate { rejected, attempts });
        }
    }
    Ok(SampleSet {
        scenarios,
        r: config.r,
        seed: config.seed,
        method: SamplingMethod::Random { jitter: config.jitter },
        case_name: case.name().to_string(),
        case_hash: case.hash().to_string(),
        rejected_count: rejected,
        n_buses: case.n_buses(),
        n_branches: case.n_branches(),
    })
}

/// Two independently drawn sets from the same case and range.
pub fn split_train_test(
    case: &NetworkCase,
    r: f64,
    k_train: usize,
    k_test: usize,
    seeds: (u64, u64),
) -> Result<(SampleSet, SampleSet), SamplingError> {
    if seeds.0 == seeds.1 {
        return Err(SamplingError::SameSeed(seeds.0));
    }
    let train = generate_samples(case, r, k_train, seeds.0)?;
    let test = generate_samples(case, r, k_test, seeds.1)?;
    Ok((train, test))
}

pub const MAX_GRID_LOAD_BUSES: usize = 6;
pub const MAX_GRID_SIZE: u128 = 1_000_000;

/// Cartesian grid of evenly spaced active-load levels over `[1−R, 1]` of
/// max-load, one axis per load bus, in lexicographic order (first load bus
/// varies slowest). Reactive demand follows at constant power factor.
/// Grid points that fail to converge are skipped and counted as rejected.
pub fn enumerate_grid_samples(
    case: &NetworkCase,
    r: f64,
    points_per_load: usize,
) -> Result<SampleSet, SamplingError> {
    check_range(r)?;
    if points_per_load < 2 {
        return Err(SamplingError::TooFewPoints);
    }
    let load_buses: Vec<usize> = (0..case.n_buses())
        .filter(|&i| case.buses()[i].p_load_max != 0.0)
        .collect();
    if load_buses.len() > MAX_GRID_LOAD_BUSES {
        return Err(SamplingError::TooManyLoadBuses {
            count: load_buses.len(),
            max: MAX_GRID_LOAD_BUSES,
        });
    }
    let size = (points_per_load as u128).pow(load_buses.len() as u32);
    if size > MAX_GRID_SIZE {
        return Err(SamplingError::GridTooLarge { size, max: MAX_GRID_SIZE });
    }
    let size = size as usize;
    let levels: Vec<f64> = (0..points_per_load)
        .map(|j| (1.0 - r) + r * j as f64 / (points_per_load - 1) as f64)
        .collect();
    let solver = PowerFlowSolver::new(case)?;
    let no_jitter = vec![1.0; case.generators().len()];
    let total_max: f64 = case.buses().iter().map(|b| b.p_load_max).sum();

    let results: Vec<Option<Scenario>> = (0..size)
        .into_par_iter()
        .map(|index| {
            let mut load_p = case.max_loads_p();
            let mut load_q = case.max_loads_q();
            let mut rest = index;
            for &bus in load_buses.iter().rev() {
                let level = levels[rest % points_per_load];
                rest /= points_per_load;
                load_p[bus] *= level;
                load_q[bus] *= level;
            }
            let eta_a = if total_max != 0.0 { load_p.iter().sum::<f64>() / total_max } else { 1.0 };
            let gen_p = dispatch(case, &load_p, 1.0, &no_jitter);
            solve_draw(&solver, index, Draw { eta_a, load_p, load_q, gen_p })
        })
        .collect::<Result<_, _>>()?;

    let rejected_count = results.iter().filter(|s| s.is_none()).count();
    Ok(SampleSet {
        scenarios: results.into_iter().flatten().collect(),
        r,
        seed: 0,
        method: SamplingMethod::Grid { points_per_load },
        case_name: case.name().to_string(),
        case_hash: case.hash().to_string(),
        rejected_count,
        n_buses: case.n_buses(),
        n_branches: case.n_branches(),
    })
}
