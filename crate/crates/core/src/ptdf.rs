//! DC power transfer distribution factors.
//!
//! Lossless, flat-voltage model: branch susceptance `1/(x·tap)`, series
//! resistance and charging ignored. Entry `(l, i)` is the MW flow on branch
//! `l` (from-end towards to-end) per MW injected at bus `i` and withdrawn at
//! the slack bus, so the slack column is zero.

use std::io::Write;

use nalgebra::DMatrix;

use crate::case::{validate::unreachable_buses, NetworkCase};
use crate::evaluation::FactorMatrix;

#[derive(Debug, thiserror::Error)]
pub enum PtdfError {
    #[error("case has no slack bus")]
    NoSlack,
    #[error("slack bus index {0} is out of range")]
    BadSlack(usize),
    #[error("branch {branch} is an in-service phase shifter")]
    PhaseShifter { branch: usize },
    #[error("branch {branch} is in service with zero reactance")]
    ZeroReactance { branch: usize },
    #[error("network is disconnected; buses {buses:?} cannot reach the slack")]
    Disconnected { buses: Vec<u64> },
    #[error("reduced susceptance matrix is singular")]
    Singular,
    #[error("injection vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// L×N sensitivity matrix. Rows of out-of-service branches are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PtdfMatrix {
    pub values: DMatrix<f64>,
    pub slack_bus: usize,
    pub case_hash: String,
}

/// Builds the PTDF with `slack` as reference (the case slack when `None`).
pub fn compute_ptdf(case: &NetworkCase, slack: Option<usize>) -> Result<PtdfMatrix, PtdfError> {
    let n = case.n_buses();
    let slack = match slack {
        Some(s) if s >= n => return Err(PtdfError::BadSlack(s)),
        Some(s) => s,
        None => case.slack_bus().ok_or(PtdfError::NoSlack)?,
    };
    let mut susceptance = vec![0.0; case.n_branches()];
    for (l, br) in case.branches().iter().enumerate() {
        if !br.in_service {
            continue;
        }
        if br.shift != 0.0 {
            return Err(PtdfError::PhaseShifter { branch: l + 1 });
        }
        if br.x == 0.0 {
            return Err(PtdfError::ZeroReactance { branch: l + 1 });
        }
        susceptance[l] = 1.0 / (br.x * br.tap);
    }
    let unreachable = unreachable_buses(case, slack);
    if !unreachable.is_empty() {
        return Err(PtdfError::Disconnected {
            buses: unreachable.iter().map(|&i| case.external_id(i)).collect(),
        });
    }

    // Reduced index: buses other than the slack, in order.
    let reduced = |i: usize| if i < slack { Some(i) } else if i > slack { Some(i - 1) } else { None };
    let mut bbus = DMatrix::<f64>::zeros(n - 1, n - 1);
    for (br, &b) in case.branches().iter().zip(&susceptance) {
        if b == 0.0 {
            continue;
        }
        let (f, t) = (reduced(br.from_bus), reduced(br.to_bus));
        if let Some(f) = f {
            bbus[(f, f)] += b;
        }
        if let Some(t) = t {
            bbus[(t, t)] += b;
        }
        if let (Some(f), Some(t)) = (f, t) {
            bbus[(f, t)] -= b;
            bbus[(t, f)] -= b;
        }
    }
    let angles = bbus
        .lu()
        .try_inverse()
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or(PtdfError::Singular)?;

    let mut values = DMatrix::zeros(case.n_branches(), n);
    for (l, (br, &b)) in case.branches().iter().zip(&susceptance).enumerate() {
        if b == 0.0 {
            continue;
        }
        for i in 0..n {
            let Some(col) = reduced(i) else { continue };
            let theta = |bus: usize| reduced(bus).map_or(0.0, |r| angles[(r, col)]);
            values[(l, i)] = b * (theta(br.from_bus) - theta(br.to_bus));
        }
    }
    Ok(PtdfMatrix { values, slack_bus: slack, case_hash: case.hash().to_string() })
}

impl PtdfMatrix {
    pub fn n_branches(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_buses(&self) -> usize {
        self.values.ncols()
    }

    /// Single-direction branch flows for the injection vector, MW.
    pub fn predict(&self, p_inj: &[f64]) -> Result<Vec<f64>, PtdfError> {
        if p_inj.len() != self.n_buses() {
            return Err(PtdfError::Dimension { expected: self.n_buses(), got: p_inj.len() });
        }
        Ok((0..self.n_branches())
            .map(|l| self.values.row(l).iter().zip(p_inj).map(|(x, p)| x * p).sum())
            .collect())
    }

    /// The 2L×N form `[Γ; −Γ]` used to compare against branch-end flows.
    pub fn expanded(&self) -> FactorMatrix {
        let l = self.n_branches();
        let mut values = DMatrix::zeros(2 * l, self.n_buses());
        values.rows_mut(0, l).copy_from(&self.values);
        values.rows_mut(l, l).copy_from(&(-&self.values));
        FactorMatrix { tag: "PTDF".to_string(), values, case_hash: self.case_hash.clone() }
    }

    /// CSV export: one row per branch, one column per bus (external ids).
    pub fn write_csv(&self, case: &NetworkCase, mut out: impl Write) -> std::io::Result<()> {
        let mut header = vec!["branch".to_string()];
        header.extend(case.buses().iter().map(|b| b.external_id.to_string()));
        writeln!(out, "{}", header.join(","))?;
        for l in 0..self.n_branches() {
            let mut row = vec![(l + 1).to_string()];
            row.extend(self.values.row(l).iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Predicted from-end and to-end flows `(P+, P−) = (Γp, −Γp)`.
pub fn predict_ptdf(ptdf: &PtdfMatrix, p_inj: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PtdfError> {
    let from = ptdf.predict(p_inj)?;
    let to = from.iter().map(|f| -f).collect();
    Ok((from, to))
}
