use nalgebra::DMatrix;
use num_complex::Complex64;

use super::AcpfError;
use crate::case::NetworkCase;

/// π-model admittances of one in-service branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

impl BranchAdmittance {
    /// Complex power entering the branch at each end, p.u.
    pub fn end_powers(&self, v: &[Complex64]) -> (Complex64, Complex64) {
        let (vf, vt) = (v[self.from], v[self.to]);
        let i_from = self.yff * vf + self.yft * vt;
        let i_to = self.ytf * vf + self.ytt * vt;
        (vf * i_from.conj(), vt * i_to.conj())
    }
}

/// Sparse nodal admittance matrix stored row-wise, plus the per-branch
/// admittances needed to recover branch-end flows.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    n: usize,
    /// Bus shunt admittance, p.u.
    shunt: Vec<Complex64>,
    branches: Vec<BranchAdmittance>,
    /// Row `i` holds `(j, Y_ij)` sorted by `j`, diagonal included.
    rows: Vec<Vec<(usize, Complex64)>>,
}

/// Assembles the nodal admittance matrix, skipping out-of-service branches.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceMatrix, AcpfError> {
    let n = case.n_buses();
    let shunt: Vec<Complex64> = case
        .buses()
        .iter()
        .map(|b| Complex64::new(b.shunt_g, b.shunt_b))
        .collect();

    let mut branches = Vec::new();
    for (l, br) in case.branches().iter().enumerate() {
        if !br.in_service {
            continue;
        }
        if br.x == 0.0 {
            return Err(AcpfError::ZeroReactance { branch: l + 1 });
        }
        let ys = Complex64::new(br.r, br.x).inv();
        let charging = Complex64::new(0.0, br.b_charging / 2.0);
        let ratio = Complex64::from_polar(br.tap, br.shift);
        let ytt = ys + charging;
        branches.push(BranchAdmittance {
            branch: l,
            from: br.from_bus,
            to: br.to_bus,
            yff: ytt / (br.tap * br.tap),
            yft: -ys / ratio.conj(),
            ytf: -ys / ratio,
            ytt,
        });
    }

    let mut dense_rows: Vec<std::collections::BTreeMap<usize, Complex64>> = (0..n)
        .map(|i| std::collections::BTreeMap::from([(i, shunt[i])]))
        .collect();
    for b in &branches {
        *dense_rows[b.from].entry(b.from).or_default() += b.yff;
        *dense_rows[b.from].entry(b.to).or_default() += b.yft;
        *dense_rows[b.to].entry(b.from).or_default() += b.ytf;
        *dense_rows[b.to].entry(b.to).or_default() += b.ytt;
    }
    let rows = dense_rows.into_iter().map(|r| r.into_iter().collect()).collect();
    Ok(AdmittanceMatrix { n, shunt, branches, rows })
}

impl AdmittanceMatrix {
    pub fn n_buses(&self) -> usize {
        self.n
    }

    pub fn shunt(&self) -> &[Complex64] {
        &self.shunt
    }

    pub fn branches(&self) -> &[BranchAdmittance] {
        &self.branches
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or_default()
    }

    /// Nodal current injections `Y v`.
    pub fn currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * v[j]).sum())
            .collect()
    }

    /// Complex power injections `v ∘ conj(Y v)`, p.u.
    pub fn injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.currents(v)
            .iter()
            .zip(v)
            .map(|(i, vi)| vi * i.conj())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                m[(i, j)] = y;
            }
        }
        m
    }
}
