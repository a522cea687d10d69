//! Polar Newton–Raphson AC power flow.
//!
//! PV buses hold scheduled P and |V| (no reactive limits); the slack bus
//! absorbs the active-power residual. The Jacobian is assembled densely and
//! refactorized every iteration, which is plenty for a few hundred buses.

mod ybus;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{BusKind, NetworkCase};

pub use ybus::{build_admittance, AdmittanceMatrix, BranchAdmittance};

#[derive(Debug, thiserror::Error)]
pub enum AcpfError {
    #[error("branch {branch} is in service with zero reactance")]
    ZeroReactance { branch: usize },
    #[error("case has no slack bus")]
    NoSlack,
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest P/Q mismatch, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tolerance: 1e-8, max_iterations: 20 }
    }
}

/// One AC operating point. Powers are in MW/MVAr; branch-end flows are
/// measured into the branch at each end, so `p_from + p_to` is the branch
/// loss. `p_inj` is the active power each bus delivers to the branch
/// network (generation minus load minus shunt consumption), hence
/// `Σ p_inj = Σ (p_from + p_to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub converged: bool,
    pub iterations: usize,
    /// Largest P/Q mismatch at the returned iterate, p.u.
    pub max_mismatch: f64,
    /// Largest mismatch before each Newton step, p.u.
    pub mismatch_history: Vec<f64>,
    pub flat_start: bool,
    pub v_mag: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    /// Active power consumed by bus shunt conductance, MW.
    pub p_shunt: Vec<f64>,
    pub p_from: Vec<f64>,
    pub p_to: Vec<f64>,
    pub q_from: Vec<f64>,
    pub q_to: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn total_loss(&self) -> f64 {
        self.p_from.iter().zip(&self.p_to).map(|(f, t)| f + t).sum()
    }

    /// Branch-end flows ordered `[all from-ends | all to-ends]`.
    pub fn branch_end_flows(&self) -> Vec<f64> {
        self.p_from.iter().chain(&self.p_to).copied().collect()
    }
}

struct NewtonOutcome {
    v: Vec<Complex64>,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

/// Solver bound to one case. Holds the admittance matrix and bus
/// classification so repeated scenario solves skip reassembly.
#[derive(Debug, Clone)]
pub struct PowerFlowSolver<'a> {
    case: &'a NetworkCase,
    ybus: AdmittanceMatrix,
    /// Buses with an angle unknown (PV then PQ order is irrelevant; ascending).
    pvpq: Vec<usize>,
    pq: Vec<usize>,
    /// Voltage magnitude held at slack/PV buses.
    v_held: Vec<Option<f64>>,
    options: SolverOptions,
}

impl<'a> PowerFlowSolver<'a> {
    pub fn new(case: &'a NetworkCase) -> Result<Self, AcpfError> {
        Self::with_options(case, SolverOptions::default())
    }

    pub fn with_options(case: &'a NetworkCase, options: SolverOptions) -> Result<Self, AcpfError> {
        let slack = case.slack_bus().ok_or(AcpfError::NoSlack)?;
        let ybus = build_admittance(case)?;
        let n = case.n_buses();

        let mut gen_v = vec![None; n];
        for g in case.generators().iter().filter(|g| g.in_service) {
            gen_v[g.bus].get_or_insert(g.v_set);
        }
        let mut v_held = vec![None; n];
        let mut pvpq = Vec::new();
        let mut pq = Vec::new();
        for (i, bus) in case.buses().iter().enumerate() {
            if i == slack {
                v_held[i] = Some(gen_v[i].unwrap_or(bus.v_init));
                continue;
            }
            pvpq.push(i);
            match (bus.kind, gen_v[i]) {
                (BusKind::Pv | BusKind::Slack, Some(v)) => v_held[i] = Some(v),
                _ => pq.push(i),
            }
        }
        Ok(PowerFlowSolver { case, ybus, pvpq, pq, v_held, options })
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.ybus
    }

    /// Solves for the given per-bus demand (MW, MVAr) and per-generator
    /// active set-points (MW). The slack generator's set-point is ignored.
    pub fn solve(
        &self,
        load_p: &[f64],
        load_q: &[f64],
        gen_p: &[f64],
    ) -> Result<PowerFlowSolution, AcpfError> {
        let n = self.case.n_buses();
        check_len("load_p", n, load_p.len())?;
        check_len("load_q", n, load_q.len())?;
        check_len("gen_p", self.case.generators().len(), gen_p.len())?;

        let base = self.case.base_mva();
        let mut sbus: Vec<Complex64> = load_p
            .iter()
            .zip(load_q)
            .map(|(p, q)| Complex64::new(-p, -q) / base)
            .collect();
        for (g, &p) in self.case.generators().iter().zip(gen_p) {
            if g.in_service {
                sbus[g.bus] += Complex64::new(p, g.q_set) / base;
            }
        }

        let case_start: Vec<Complex64> = self
            .case
            .buses()
            .iter()
            .zip(&self.v_held)
            .map(|(b, held)| Complex64::from_polar(held.unwrap_or(b.v_init), b.theta_init))
            .collect();
        let flat: Vec<Complex64> = self
            .v_held
            .iter()
            .map(|held| Complex64::new(held.unwrap_or(1.0), 0.0))
            .collect();

        let first = self.newton(case_start, &sbus);
        let (outcome, flat_start) = match first {
            Ok(out) if out.converged => (out, false),
            first => match (self.newton(flat, &sbus), first) {
                (Ok(out), _) if out.converged => (out, true),
                (_, Ok(out)) => (out, false),
                (Ok(out), Err(_)) => (out, true),
                (Err(e), Err(_)) => return Err(e),
            },
        };
        Ok(self.finish(outcome, flat_start))
    }

    fn newton(&self, mut v: Vec<Complex64>, sbus: &[Complex64]) -> Result<NewtonOutcome, AcpfError> {
        let n_a = self.pvpq.len();
        let n_m = self.pq.len();
        let mut vm: Vec<f64> = v.iter().map(|x| x.norm()).collect();
        let mut va: Vec<f64> = v.iter().map(|x| x.arg()).collect();
        let mut history = Vec::new();

        for iteration in 0..=self.options.max_iterations {
            let s_calc = self.ybus.injections(&v);
            let mut f = DVector::zeros(n_a + n_m);
            for (r, &i) in self.pvpq.iter().enumerate() {
                f[r] = (s_calc[i] - sbus[i]).re;
            }
            for (r, &i) in self.pq.iter().enumerate() {
                f[n_a + r] = (s_calc[i] - sbus[i]).im;
            }
            let norm = f
                .iter()
                .fold(0.0_f64, |m, x| if m.is_nan() || x.is_nan() { f64::NAN } else { m.max(x.abs()) });
            history.push(norm);
            if !norm.is_finite() {
                return Ok(NewtonOutcome { v, converged: false, iterations: iteration, history });
            }
            if norm <= self.options.tolerance {
                return Ok(NewtonOutcome { v, converged: true, iterations: iteration, history });
            }
            if iteration == self.options.max_iterations {
                break;
            }
            let jac = self.jacobian(&v);
            let dx = jac
                .lu()
                .solve(&f)
                .filter(|dx| dx.iter().all(|x| x.is_finite()))
                .ok_or(AcpfError::SingularJacobian { iteration })?;
            for (r, &i) in self.pvpq.iter().enumerate() {
                va[i] -= dx[r];
            }
            for (r, &i) in self.pq.iter().enumerate() {
                vm[i] -= dx[n_a + r];
            }
            for i in 0..v.len() {
                v[i] = Complex64::from_polar(vm[i], va[i]);
            }
        }
        let iterations = self.options.max_iterations;
        Ok(NewtonOutcome { v, converged: false, iterations, history })
    }

    /// Mismatch Jacobian `[dP/dθ dP/d|V|; dQ/dθ dQ/d|V|]` over the unknowns.
    fn jacobian(&self, v: &[Complex64]) -> DMatrix<f64> {
        let n = v.len();
        let n_a = self.pvpq.len();
        let dim = n_a + self.pq.len();
        let mut pos_a = vec![usize::MAX; n];
        let mut pos_m = vec![usize::MAX; n];
        for (r, &i) in self.pvpq.iter().enumerate() {
            pos_a[i] = r;
        }
        for (r, &i) in self.pq.iter().enumerate() {
            pos_m[i] = n_a + r;
        }
        let current = self.ybus.currents(v);
        let mut jac = DMatrix::zeros(dim, dim);
        for &i in &self.pvpq {
            let vi = v[i];
            let unit_i = vi / vi.norm();
            for &(j, y) in self.ybus.row(i) {
                let unit_j = v[j] / v[j].norm();
                let mut ds_dvm = vi * (y * unit_j).conj();
                let mut ds_dva = Complex64::i() * vi * (-y * v[j]).conj();
                if i == j {
                    ds_dvm += current[i].conj() * unit_i;
                    ds_dva += Complex64::i() * vi * current[i].conj();
                }
                let (ra, rm) = (pos_a[i], pos_m[i]);
                let (ca, cm) = (pos_a[j], pos_m[j]);
                if ca != usize::MAX {
                    jac[(ra, ca)] = ds_dva.re;
                    if rm != usize::MAX {
                        jac[(rm, ca)] = ds_dva.im;
                    }
                }
                if cm != usize::MAX {
                    jac[(ra, cm)] = ds_dvm.re;
                    if rm != usize::MAX {
                        jac[(rm, cm)] = ds_dvm.im;
                    }
                }
            }
        }
        jac
    }

    fn finish(&self, out: NewtonOutcome, flat_start: bool) -> PowerFlowSolution {
        let base = self.case.base_mva();
        let v = &out.v;
        let s_calc = self.ybus.injections(v);
        let shunt = self.ybus.shunt();
        let mut p_inj = Vec::with_capacity(v.len());
        let mut q_inj = Vec::with_capacity(v.len());
        let mut p_shunt = Vec::with_capacity(v.len());
        for i in 0..v.len() {
            let vsq = v[i].norm_sqr();
            p_inj.push((s_calc[i].re - shunt[i].re * vsq) * base);
            q_inj.push((s_calc[i].im + shunt[i].im * vsq) * base);
            p_shunt.push(shunt[i].re * vsq * base);
        }
        let l = self.case.n_branches();
        let (mut p_from, mut p_to) = (vec![0.0; l], vec![0.0; l]);
        let (mut q_from, mut q_to) = (vec![0.0; l], vec![0.0; l]);
        for b in self.ybus.branches() {
            let (sf, st) = b.end_powers(v);
            p_from[b.branch] = sf.re * base;
            q_from[b.branch] = sf.im * base;
            p_to[b.branch] = st.re * base;
            q_to[b.branch] = st.im * base;
        }
        PowerFlowSolution {
            converged: out.converged,
            iterations: out.iterations,
            max_mismatch: *out.history.last().unwrap_or(&f64::NAN),
            mismatch_history: out.history,
            flat_start,
            v_mag: v.iter().map(|x| x.norm()).collect(),
            theta: v.iter().map(|x| x.arg()).collect(),
            p_inj,
            q_inj,
            p_shunt,
            p_from,
            p_to,
            q_from,
            q_to,
        }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AcpfError> {
    if expected != got {
        return Err(AcpfError::Dimension { what, expected, got });
    }
    Ok(())
}

/// Solves the case at the given demand and generator set-points.
pub fn solve_power_flow(
    case: &NetworkCase,
    load_p: &[f64],
    load_q: &[f64],
    gen_p: &[f64],
) -> Result<PowerFlowSolution, AcpfError> {
    PowerFlowSolver::new(case)?.solve(load_p, load_q, gen_p)
}

/// Solves the case at its nominal (max-load) demand and case set-points.
pub fn solve_nominal(case: &NetworkCase) -> Result<PowerFlowSolution, AcpfError> {
    solve_power_flow(
        case,
        &case.max_loads_p(),
        &case.max_loads_q(),
        &case.generator_setpoints(),
    )
}
