//! Least-squares distribution factors.
//!
//! For every branch end `l` the factor row `x_l` minimizes
//! `Σ_k (P_l^(k) − x_l · P^(k))²` over the training scenarios. All rows share
//! the Gram matrix `A = Σ_k P^(k) P^(k)ᵀ`, so the whole 2L×N matrix comes
//! from one factorization of `A` applied to the right-hand sides
//! `B = [b_1 … b_2L]`, `b_l = Σ_k P_l^(k) P^(k)`.
//!
//! Every bus, slack included, is a regressor and there is no intercept.
//! Buses whose injection is zero (up to solver residue) in every scenario
//! give an all-zero row and column in `A`; they are left out of the
//! factorization and their factor column is zero, the minimum-norm choice.

use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::NetworkCase;
use crate::compensated::{two_prod, Dd};
use crate::sampling::{SampleSet, SamplingMethod, Scenario};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_RTOL: f64 = 1e-12;

/// A bus whose RMS injection is below this fraction of the largest bus's is
/// treated as a transit bus and left out of the fit. Newton residuals leave
/// injections of order 1e-9 MW on buses with nothing connected.
pub const NEGLIGIBLE_INJECTION: f64 = 1e-6;

const SHARD: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum LsdfError {
    #[error("no samples accumulated")]
    NoSamples,
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("factor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), LsdfError> {
    if expected != got {
        return Err(LsdfError::Dimension { what, expected, got });
    }
    Ok(())
}

/// Sufficient statistics of the least-squares problem, in MW².
///
/// Sums are carried in double-double precision; `a()`, `b()` and `c()`
/// expose the leading f64 part. Rounding in the sums would otherwise cost
/// about `cond(A)·ε` of relative accuracy in the solved factors, and `A`
/// is badly conditioned because bus injections nearly cancel (their sum is
/// only the network loss).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    a: DMatrix<f64>,
    a_lo: DMatrix<f64>,
    b: DMatrix<f64>,
    b_lo: DMatrix<f64>,
    c: DVector<f64>,
    c_lo: DVector<f64>,
    k_count: usize,
}

fn add_into(hi: &mut f64, lo: &mut f64, add_hi: f64, add_lo: f64) {
    let mut acc = Dd::new(*hi, *lo);
    acc.add(add_hi, add_lo);
    (*hi, *lo) = (acc.hi, acc.lo);
}

fn add_prod_into(hi: &mut f64, lo: &mut f64, x: f64, y: f64) {
    let (p, e) = two_prod(x, y);
    add_into(hi, lo, p, e);
}

impl NormalEquations {
    pub fn new(n_buses: usize, n_branch_ends: usize) -> Self {
        NormalEquations {
            a: DMatrix::zeros(n_buses, n_buses),
            a_lo: DMatrix::zeros(n_buses, n_buses),
            b: DMatrix::zeros(n_buses, n_branch_ends),
            b_lo: DMatrix::zeros(n_buses, n_branch_ends),
            c: DVector::zeros(n_branch_ends),
            c_lo: DVector::zeros(n_branch_ends),
            k_count: 0,
        }
    }

    /// Adds one scenario: `A += P Pᵀ`, `b_l += P_l P`, `c_l += P_l²`.
    pub fn accumulate(&mut self, p_inj: &[f64], p_branch: &[f64]) -> Result<(), LsdfError> {
        let n = self.a.nrows();
        check_len("p_inj", n, p_inj.len())?;
        check_len("p_branch", self.b.ncols(), p_branch.len())?;
        for (j, &pj) in p_inj.iter().enumerate() {
            let hi = self.a.column_mut(j);
            let lo = self.a_lo.column_mut(j);
            for ((h, l), &pi) in hi.into_iter().zip(lo).zip(p_inj) {
                add_prod_into(h, l, pi, pj);
            }
        }
        for (col, &f) in p_branch.iter().enumerate() {
            let hi = self.b.column_mut(col);
            let lo = self.b_lo.column_mut(col);
            for ((h, l), &pi) in hi.into_iter().zip(lo).zip(p_inj) {
                add_prod_into(h, l, pi, f);
            }
            add_prod_into(&mut self.c[col], &mut self.c_lo[col], f, f);
        }
        self.k_count += 1;
        Ok(())
    }

    pub fn accumulate_scenario(&mut self, s: &Scenario) -> Result<(), LsdfError> {
        self.accumulate(&s.p_inj, &s.p_branch)
    }

    /// Adds another partial sum over a disjoint set of scenarios.
    pub fn merge(&mut self, other: &NormalEquations) -> Result<(), LsdfError> {
        check_len("n_buses", self.a.nrows(), other.a.nrows())?;
        check_len("n_branch_ends", self.b.ncols(), other.b.ncols())?;
        let pairs = [
            (&mut self.a, &mut self.a_lo, &other.a, &other.a_lo),
            (&mut self.b, &mut self.b_lo, &other.b, &other.b_lo),
        ];
        for (hi, lo, ohi, olo) in pairs {
            for (((h, l), &oh), &ol) in hi.iter_mut().zip(lo.iter_mut()).zip(ohi.iter()).zip(olo.iter()) {
                add_into(h, l, oh, ol);
            }
        }
        for l in 0..self.c.len() {
            add_into(&mut self.c[l], &mut self.c_lo[l], other.c[l], other.c_lo[l]);
        }
        self.k_count += other.k_count;
        Ok(())
    }

    /// Accumulates a sample set in fixed-size shards that are summed in
    /// scenario order, so the result does not depend on the thread count.
    pub fn from_samples(set: &SampleSet) -> Result<Self, LsdfError> {
        let (n, m) = (set.n_buses, 2 * set.n_branches);
        let shards = set
            .scenarios
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut ne = NormalEquations::new(n, m);
                for s in chunk {
                    ne.accumulate_scenario(s)?;
                }
                Ok(ne)
            })
            .collect::<Result<Vec<_>, LsdfError>>()?;
        let mut total = NormalEquations::new(n, m);
        for shard in &shards {
            total.merge(shard)?;
        }
        Ok(total)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn k_count(&self) -> usize {
        self.k_count
    }

    pub fn n_buses(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_branch_ends(&self) -> usize {
        self.b.ncols()
    }

    /// Training sum of squared errors of `factors` (2L×N) per branch end,
    /// `x A xᵀ − 2 bᵀ xᵀ + c`. Subject to cancellation when the fit is
    /// close; prefer direct residuals when accuracy matters.
    pub fn sse(&self, factors: &DMatrix<f64>) -> Vec<f64> {
        (0..self.n_branch_ends())
            .map(|l| {
                let x = factors.row(l).transpose();
                let quad = (x.transpose() * &self.a * &x)[(0, 0)];
                quad - 2.0 * self.b.column(l).dot(&x) + self.c[l]
            })
            .collect()
    }

    /// Buses whose RMS injection is at least `NEGLIGIBLE_INJECTION` of the
    /// largest one, in index order.
    fn active_buses(&self) -> Vec<usize> {
        let n = self.n_buses();
        let max_diag = (0..n).map(|i| self.a[(i, i)]).fold(0.0_f64, f64::max);
        let floor = max_diag * NEGLIGIBLE_INJECTION * NEGLIGIBLE_INJECTION;
        (0..n).filter(|&i| self.a[(i, i)] > floor).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveOptions {
    /// Ridge penalty added to the diagonal of `A`; 0 disables it.
    pub ridge: f64,
}

/// Provenance of a fitted factor matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub case_name: String,
    pub case_hash: String,
    pub r: f64,
    pub k: usize,
    pub seed: u64,
    pub method: SamplingMethod,
}

/// Fitted 2L×N factors. Rows `0..L` are from-ends, rows `L..2L` to-ends.
#[derive(Debug, Clone, PartialEq)]
pub struct LsdfMatrix {
    pub values: DMatrix<f64>,
    /// Numerical rank of `A` restricted to the active buses.
    pub rank_of_a: usize,
    pub regularization_used: bool,
    /// Internal indices of buses whose injection is negligible in every
    /// scenario (transit buses); their factor columns are zero.
    pub excluded_buses: Vec<usize>,
    pub training: Option<TrainingMeta>,
}

/// Solves `A Xᵀ = B` for all branch ends.
///
/// With a nonsingular active block of `A` and no ridge, one Cholesky
/// factorization is shared by every right-hand side, each column is
/// refined against the double-double sums, and the columns are solved in
/// parallel. A rank-deficient block falls back to the minimum-norm solution
/// via a symmetric eigendecomposition and sets `regularization_used`.
pub fn solve_lsdf(ne: &NormalEquations, options: SolveOptions) -> Result<LsdfMatrix, LsdfError> {
    if ne.k_count == 0 {
        return Err(LsdfError::NoSamples);
    }
    let n = ne.n_buses();
    let m = ne.n_branch_ends();
    let active = ne.active_buses();
    let excluded: Vec<usize> = (0..n).filter(|i| active.binary_search(i).is_err()).collect();
    let na = active.len();

    let block = |hi: &DMatrix<f64>, cols: &dyn Fn(usize) -> usize, ncols: usize| {
        DMatrix::from_fn(na, ncols, |r, c| hi[(active[r], cols(c))])
    };
    let sys = System {
        a: block(&ne.a, &|c| active[c], na),
        a_lo: block(&ne.a_lo, &|c| active[c], na),
        b: block(&ne.b, &|c| c, m),
        b_lo: block(&ne.b_lo, &|c| c, m),
        ridge: options.ridge.max(0.0),
    };

    let eigen = SymmetricEigen::new(sys.a.clone());
    let lambda_max = eigen.eigenvalues.iter().fold(0.0_f64, |acc, &v| acc.max(v));
    let tol = lambda_max * RANK_RTOL;
    let rank_of_a = eigen.eigenvalues.iter().filter(|&&v| v > tol).count();

    let (solution, regularization_used) = if sys.ridge > 0.0 {
        let shifted = &sys.a + DMatrix::identity(na, na) * sys.ridge;
        let chol = Cholesky::new(shifted).expect("A + ridge·I is positive definite");
        (sys.solve_columns(&chol), true)
    } else if rank_of_a == na {
        match Cholesky::new(sys.a.clone()) {
            Some(chol) => (sys.solve_columns(&chol), false),
            None => (min_norm(&eigen, tol, &sys.b), true),
        }
    } else {
        (min_norm(&eigen, tol, &sys.b), true)
    };

    let mut values = DMatrix::zeros(m, n);
    for (r, &bus) in active.iter().enumerate() {
        for l in 0..m {
            values[(l, bus)] = solution[(r, l)];
        }
    }
    Ok(LsdfMatrix {
        values,
        rank_of_a,
        regularization_used,
        excluded_buses: excluded,
        training: None,
    })
}

/// Active block of the normal equations with its low-order parts.
struct System {
    a: DMatrix<f64>,
    a_lo: DMatrix<f64>,
    b: DMatrix<f64>,
    b_lo: DMatrix<f64>,
    ridge: f64,
}

const MAX_REFINEMENTS: usize = 10;

impl System {
    /// `b_l − (A + ridge·I) x` evaluated in double-double.
    fn residual(&self, l: usize, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut acc: Vec<Dd> = (0..n).map(|i| Dd::new(self.b[(i, l)], self.b_lo[(i, l)])).collect();
        for (k, &xk) in x.iter().enumerate() {
            let (hi, lo) = (self.a.column(k), self.a_lo.column(k));
            for i in 0..n {
                acc[i].add_prod(-hi[i], xk);
                acc[i].add(-lo[i] * xk, 0.0);
            }
            if self.ridge > 0.0 {
                acc[k].add_prod(-self.ridge, xk);
            }
        }
        DVector::from_iterator(n, acc.into_iter().map(Dd::value))
    }

    /// Cholesky solve of every right-hand side followed by iterative
    /// refinement until the correction stops shrinking.
    fn solve_columns(&self, chol: &Cholesky<f64, nalgebra::Dyn>) -> DMatrix<f64> {
        let columns: Vec<DVector<f64>> = (0..self.b.ncols())
            .into_par_iter()
            .map(|l| {
                let mut x = chol.solve(&self.b.column(l).into_owned());
                let mut last = f64::INFINITY;
                for _ in 0..MAX_REFINEMENTS {
                    let dx = chol.solve(&self.residual(l, &x));
                    let size = dx.amax();
                    if size >= last {
                        break;
                    }
                    x += &dx;
                    last = size;
                    if size <= f64::EPSILON * x.amax() {
                        break;
                    }
                }
                x
            })
            .collect();
        DMatrix::from_columns(&columns)
    }
}

/// `A⁺ B` from the eigendecomposition, dropping eigenvalues at or below `tol`.
fn min_norm(eigen: &SymmetricEigen<f64, nalgebra::Dyn>, tol: f64, b: &DMatrix<f64>) -> DMatrix<f64> {
    let v = &eigen.eigenvectors;
    let mut projected = v.transpose() * b;
    for (r, &lambda) in eigen.eigenvalues.iter().enumerate() {
        let scale = if lambda > tol { 1.0 / lambda } else { 0.0 };
        projected.row_mut(r).scale_mut(scale);
    }
    v * projected
}

/// Accumulates the sample set and solves for the factors.
pub fn fit(samples: &SampleSet) -> Result<LsdfMatrix, LsdfError> {
    fit_with(samples, SolveOptions::default())
}

pub fn fit_with(samples: &SampleSet, options: SolveOptions) -> Result<LsdfMatrix, LsdfError> {
    if samples.is_empty() {
        return Err(LsdfError::NoSamples);
    }
    let ne = NormalEquations::from_samples(samples)?;
    let mut x = solve_lsdf(&ne, options)?;
    x.training = Some(TrainingMeta {
        case_name: samples.case_name.clone(),
        case_hash: samples.case_hash.clone(),
        r: samples.r,
        k: samples.k(),
        seed: samples.seed,
        method: samples.method,
    });
    Ok(x)
}

impl LsdfMatrix {
    pub fn n_buses(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_branches(&self) -> usize {
        self.values.nrows() / 2
    }

    pub fn case_hash(&self) -> Option<&str> {
        self.training.as_ref().map(|t| t.case_hash.as_str())
    }

    /// From-end block `X₊` (L×N).
    pub fn from_block(&self) -> DMatrix<f64> {
        self.values.rows(0, self.n_branches()).into_owned()
    }

    /// To-end block `X₋` (L×N).
    pub fn to_block(&self) -> DMatrix<f64> {
        self.values.rows(self.n_branches(), self.n_branches()).into_owned()
    }
}

/// Predicted branch-end flows `[X₊ p | X₋ p]`, MW.
pub fn predict_lsdf(x: &LsdfMatrix, p_inj: &[f64]) -> Result<Vec<f64>, LsdfError> {
    check_len("p_inj", x.n_buses(), p_inj.len())?;
    Ok(matvec(&x.values, p_inj))
}

pub(crate) fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per bus, `Σ_l (x_{l+,i} + x_{l−,i}) − 1`.
pub fn column_sum_check(x: &LsdfMatrix) -> Vec<f64> {
    column_sum_deviation(&x.values)
}

pub fn column_sum_deviation(values: &DMatrix<f64>) -> Vec<f64> {
    values.column_iter().map(|c| c.sum() - 1.0).collect()
}

/// Predicted total loss `Σ_l (P₊ᴬ + P₋ᴬ)`, MW.
pub fn total_loss_prediction(x: &LsdfMatrix, p_inj: &[f64]) -> Result<f64, LsdfError> {
    Ok(predict_lsdf(x, p_inj)?.iter().sum())
}

/// Half the Frobenius norm of a factor matrix.
pub fn ci_indicator(values: &DMatrix<f64>) -> f64 {
    0.5 * values.norm()
}

const FORMAT: &str = "lsdf-factors/1";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    n_buses: usize,
    n_branches: usize,
    rank_of_a: usize,
    regularization_used: bool,
    excluded_buses: Vec<usize>,
    training: Option<TrainingMeta>,
}

/// Writes the factor CSV (2L rows, from-block first) and its JSON sidecar.
pub fn write_lsdf(
    x: &LsdfMatrix,
    case: &NetworkCase,
    mut csv: impl Write,
    mut sidecar: impl Write,
) -> Result<(), LsdfError> {
    let l_count = x.n_branches();
    let mut header = vec!["branch".to_string(), "end".to_string()];
    header.extend(case.buses().iter().map(|b| b.external_id.to_string()));
    writeln!(csv, "{}", header.join(","))?;
    for row in 0..x.values.nrows() {
        let (branch, end) = if row < l_count { (row + 1, "from") } else { (row - l_count + 1, "to") };
        let mut fields = vec![branch.to_string(), end.to_string()];
        fields.extend(x.values.row(row).iter().map(|v| v.to_string()));
        writeln!(csv, "{}", fields.join(","))?;
    }
    let meta = Sidecar {
        format: FORMAT.to_string(),
        n_buses: x.n_buses(),
        n_branches: l_count,
        rank_of_a: x.rank_of_a,
        regularization_used: x.regularization_used,
        excluded_buses: x.excluded_buses.clone(),
        training: x.training.clone(),
    };
    writeln!(sidecar, "{}", serde_json::to_string_pretty(&meta).expect("sidecar serializes"))?;
    Ok(())
}

pub fn read_lsdf(csv: impl BufRead, sidecar: impl BufRead) -> Result<LsdfMatrix, LsdfError> {
    let meta: Sidecar =
        serde_json::from_reader(sidecar).map_err(|e| LsdfError::Format(e.to_string()))?;
    if meta.format != FORMAT {
        return Err(LsdfError::Format(format!("unknown format `{}`", meta.format)));
    }
    let rows = 2 * meta.n_branches;
    let mut values = DMatrix::zeros(rows, meta.n_buses);
    let mut lines = csv.lines();
    lines.next().ok_or_else(|| LsdfError::Format("empty factor CSV".into()))??;
    let mut count = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if count >= rows {
            return Err(LsdfError::Format(format!("more than {rows} factor rows")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + meta.n_buses {
            return Err(LsdfError::Format(format!("row {} has {} fields", count + 1, fields.len())));
        }
        for (i, f) in fields[2..].iter().enumerate() {
            values[(count, i)] = f
                .parse()
                .map_err(|e| LsdfError::Format(format!("row {}: `{f}`: {e}", count + 1)))?;
        }
        count += 1;
    }
    if count != rows {
        return Err(LsdfError::Format(format!("expected {rows} factor rows, found {count}")));
    }
    Ok(LsdfMatrix {
        values,
        rank_of_a: meta.rank_of_a,
        regularization_used: meta.regularization_used,
        excluded_buses: meta.excluded_buses,
        training: meta.training,
    })
}
