//! Error metrics and LSDF-vs-PTDF comparison.
//!
//! Both models are scored on the 2L branch-end footing: the PTDF is
//! expanded to `[Γ; −Γ]` so its to-end prediction is the negated from-end
//! flow. "Avg. Err" is the mean absolute error over every branch end and
//! every test scenario; "Max. Err" is the largest absolute error.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::case::NetworkCase;
use crate::lsdf::{ci_indicator, fit, matvec, LsdfError, LsdfMatrix};
use crate::ptdf::{compute_ptdf, PtdfError};
use crate::sampling::{split_train_test, SampleSet, SamplingError, SamplingMethod};

const CHUNK: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("model was built for case {model}, samples come from case {samples}")]
    CaseMismatch { model: String, samples: String },
    #[error("test set is empty")]
    Empty,
    #[error("model is {rows}×{cols}, samples have {n_buses} buses and {n_branches} branches")]
    Dimension {
        rows: usize,
        cols: usize,
        n_buses: usize,
        n_branches: usize,
    },
    #[error("K = {k} exceeds the {available} scenarios of the reference set")]
    ReferenceTooSmall { k: usize, available: usize },
    #[error("sample-count schedule must be ascending and nonzero")]
    BadSchedule,
    #[error("histogram bin width must be positive, got {0}")]
    BinWidth(f64),
    #[error(transparent)]
    Lsdf(#[from] LsdfError),
    #[error(transparent)]
    Ptdf(#[from] PtdfError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 2L×N linear flow model tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub tag: String,
    pub values: DMatrix<f64>,
    pub case_hash: String,
}

impl FactorMatrix {
    /// Wraps fitted factors; the case hash comes from the training metadata.
    pub fn from_lsdf(x: &LsdfMatrix) -> Self {
        FactorMatrix {
            tag: "LSDF".to_string(),
            values: x.values.clone(),
            case_hash: x.case_hash().unwrap_or_default().to_string(),
        }
    }

    pub fn predict(&self, p_inj: &[f64]) -> Vec<f64> {
        matvec(&self.values, p_inj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    From,
    To,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::From => "from",
            Direction::To => "to",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchEndError {
    /// 1-based branch number in case order.
    pub branch: usize,
    pub direction: Direction,
    pub avg_abs_err: f64,
    pub max_abs_err: f64,
    /// Scenario index (as stored in the sample set) of the largest error.
    pub argmax_scenario: usize,
    pub true_flow_at_max: f64,
    /// `100 · max_abs_err / |true flow|`; `None` when the true flow is 0.
    pub err_percent_at_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMeta {
    pub case_name: String,
    pub case_hash: String,
    pub r: f64,
    pub k: usize,
    pub seed: u64,
    pub method: SamplingMethod,
}

impl SampleMeta {
    fn of(set: &SampleSet) -> Self {
        SampleMeta {
            case_name: set.case_name.clone(),
            case_hash: set.case_hash.clone(),
            r: set.r,
            k: set.k(),
            seed: set.seed,
            method: set.method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub model_tag: String,
    pub per_branch_end: Vec<BranchEndError>,
    pub avg_err: f64,
    pub max_err: f64,
    /// Sum of squared errors over all branch ends and scenarios, MW².
    pub sse: f64,
    pub sample_meta: SampleMeta,
}

#[derive(Clone)]
struct Partial {
    abs_sum: Vec<f64>,
    sq_sum: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    true_at_max: Vec<f64>,
}

impl Partial {
    fn new(m: usize) -> Self {
        Partial {
            abs_sum: vec![0.0; m],
            sq_sum: vec![0.0; m],
            max: vec![f64::NEG_INFINITY; m],
            argmax: vec![0; m],
            true_at_max: vec![0.0; m],
        }
    }

    /// Later partials only replace the maximum when strictly larger, so the
    /// earliest scenario wins ties.
    fn merge(&mut self, other: &Partial) {
        for l in 0..self.abs_sum.len() {
            self.abs_sum[l] += other.abs_sum[l];
            self.sq_sum[l] += other.sq_sum[l];
            if other.max[l] > self.max[l] {
                self.max[l] = other.max[l];
                self.argmax[l] = other.argmax[l];
                self.true_at_max[l] = other.true_at_max[l];
            }
        }
    }
}

/// Scores `model` on every scenario of `test`.
pub fn evaluate(model: &FactorMatrix, test: &SampleSet) -> Result<ErrorReport, EvalError> {
    if model.case_hash != test.case_hash {
        return Err(EvalError::CaseMismatch {
            model: model.case_hash.clone(),
            samples: test.case_hash.clone(),
        });
    }
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = 2 * test.n_branches;
    if model.values.nrows() != m || model.values.ncols() != test.n_buses {
        return Err(EvalError::Dimension {
            rows: model.values.nrows(),
            cols: model.values.ncols(),
            n_buses: test.n_buses,
            n_branches: test.n_branches,
        });
    }

    let partials: Vec<Partial> = test
        .scenarios
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial::new(m);
            for s in chunk {
                let pred = model.predict(&s.p_inj);
                for (l, (predicted, actual)) in pred.iter().zip(&s.p_branch).enumerate() {
                    let err = (predicted - actual).abs();
                    part.abs_sum[l] += err;
                    part.sq_sum[l] += err * err;
                    if err > part.max[l] {
                        part.max[l] = err;
                        part.argmax[l] = s.index;
                        part.true_at_max[l] = *actual;
                    }
                }
            }
            part
        })
        .collect();
    let mut total = Partial::new(m);
    for part in &partials {
        total.merge(part);
    }

    let k = test.k() as f64;
    let l_count = test.n_branches;
    let per_branch_end: Vec<BranchEndError> = (0..m)
        .map(|l| {
            let (branch, direction) =
                if l < l_count { (l + 1, Direction::From) } else { (l - l_count + 1, Direction::To) };
            let true_flow = total.true_at_max[l];
            BranchEndError {
                branch,
                direction,
                avg_abs_err: total.abs_sum[l] / k,
                max_abs_err: total.max[l],
                argmax_scenario: total.argmax[l],
                true_flow_at_max: true_flow,
                err_percent_at_max: (true_flow != 0.0)
                    .then(|| 100.0 * total.max[l] / true_flow.abs()),
            }
        })
        .collect();
    let avg_err = if m == 0 {
        0.0
    } else {
        per_branch_end.iter().map(|e| e.avg_abs_err).sum::<f64>() / m as f64
    };
    let max_err = per_branch_end.iter().map(|e| e.max_abs_err).fold(0.0, f64::max);
    Ok(ErrorReport {
        model_tag: model.tag.clone(),
        per_branch_end,
        avg_err,
        max_err,
        sse: total.sq_sum.iter().sum(),
        sample_meta: SampleMeta::of(test),
    })
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub case_name: String,
    pub n_buses: usize,
    pub r: f64,
    pub k_train: usize,
    pub k_test: usize,
    pub lsdf_avg_err: f64,
    pub lsdf_max_err: f64,
    pub ptdf_avg_err: f64,
    pub ptdf_max_err: f64,
    /// LSDF average error divided by PTDF average error.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub lsdf: ErrorReport,
    pub ptdf: ErrorReport,
    pub lsdf_train_sse: f64,
    pub ptdf_train_sse: f64,
    pub rank_of_a: usize,
    pub regularization_used: bool,
    pub row: TableRow,
    #[serde(skip)]
    pub factors: LsdfMatrix,
}

/// Samples training and test sets, fits the LSDF, builds the PTDF with the
/// case slack, and scores both.
pub fn compare(
    case: &NetworkCase,
    r: f64,
    k_train: usize,
    k_test: usize,
    seeds: (u64, u64),
) -> Result<Comparison, EvalError> {
    let (train, test) = split_train_test(case, r, k_train, k_test, seeds)?;
    compare_sets(case, &train, &test)
}

/// Same as [`compare`] on sample sets drawn elsewhere.
pub fn compare_sets(
    case: &NetworkCase,
    train: &SampleSet,
    test: &SampleSet,
) -> Result<Comparison, EvalError> {
    let factors = fit(train)?;
    let lsdf_model = FactorMatrix::from_lsdf(&factors);
    let ptdf_model = compute_ptdf(case, None)?.expanded();

    let lsdf = evaluate(&lsdf_model, test)?;
    let ptdf = evaluate(&ptdf_model, test)?;
    let lsdf_train_sse = evaluate(&lsdf_model, train)?.sse;
    let ptdf_train_sse = evaluate(&ptdf_model, train)?.sse;
    let row = TableRow {
        case_name: case.name().to_string(),
        n_buses: case.n_buses(),
        r: train.r,
        k_train: train.k(),
        k_test: test.k(),
        lsdf_avg_err: lsdf.avg_err,
        lsdf_max_err: lsdf.max_err,
        ptdf_avg_err: ptdf.avg_err,
        ptdf_max_err: ptdf.max_err,
        ratio: lsdf.avg_err / ptdf.avg_err,
    };
    Ok(Comparison {
        rank_of_a: factors.rank_of_a,
        regularization_used: factors.regularization_used,
        lsdf,
        ptdf,
        lsdf_train_sse,
        ptdf_train_sse,
        row,
        factors,
    })
}

/// The branch end with the largest error, annotated with network context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Drilldown {
    pub model_tag: String,
    pub branch: usize,
    pub direction: Direction,
    pub from_bus: u64,
    pub to_bus: u64,
    pub is_transformer: bool,
    pub slack_adjacent: bool,
    pub max_abs_err: f64,
    pub avg_abs_err: f64,
    pub scenario: usize,
    pub true_flow: f64,
    pub err_percent: Option<f64>,
}

/// `None` only for a report without branch ends.
pub fn worst_branch_drilldown(report: &ErrorReport, case: &NetworkCase) -> Option<Drilldown> {
    let worst = report
        .per_branch_end
        .iter()
        .reduce(|best, e| if e.max_abs_err > best.max_abs_err { e } else { best })?;
    let br = &case.branches()[worst.branch - 1];
    let slack = case.slack_bus();
    Some(Drilldown {
        model_tag: report.model_tag.clone(),
        branch: worst.branch,
        direction: worst.direction,
        from_bus: case.external_id(br.from_bus),
        to_bus: case.external_id(br.to_bus),
        is_transformer: br.is_transformer,
        slack_adjacent: slack.is_some_and(|s| br.from_bus == s || br.to_bus == s),
        max_abs_err: worst.max_abs_err,
        avg_abs_err: worst.avg_abs_err,
        scenario: worst.argmax_scenario,
        true_flow: worst.true_flow_at_max,
        err_percent: worst.err_percent_at_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub k: usize,
    pub ci: f64,
    /// Average error of this fit over the whole reference set, MW.
    pub avg_err: f64,
    /// Frobenius distance to the reference factors.
    pub factor_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceCurve {
    pub points: Vec<ConvergencePoint>,
    pub reference_ci: f64,
    pub reference_k: usize,
}

/// Fits the reference factors from all of `reference`, then for each `K`
/// in `schedule` fits from a random `K`-subset (a prefix of one seeded
/// shuffle, so the subsets are nested). `K` equal to the reference size
/// uses every scenario in stored order.
pub fn convergence_study(
    reference: &SampleSet,
    schedule: &[usize],
    seed: u64,
) -> Result<ConvergenceCurve, EvalError> {
    if schedule.is_empty() || schedule[0] == 0 || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadSchedule);
    }
    let available = reference.k();
    if let Some(&k) = schedule.iter().find(|&&k| k > available) {
        return Err(EvalError::ReferenceTooSmall { k, available });
    }
    let ref_fit = fit(reference)?;
    let reference_ci = ci_indicator(&ref_fit.values);

    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut points = Vec::with_capacity(schedule.len());
    for &k in schedule {
        let x = if k == available {
            ref_fit.clone()
        } else {
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            fit(&reference.subset(&chosen))?
        };
        let avg_err = evaluate(&FactorMatrix::from_lsdf(&x), reference)?.avg_err;
        points.push(ConvergencePoint {
            k,
            ci: ci_indicator(&x.values),
            avg_err,
            factor_distance: (&x.values - &ref_fit.values).norm(),
        });
    }
    Ok(ConvergenceCurve { points, reference_ci, reference_k: available })
}

pub fn write_convergence_csv(curve: &ConvergenceCurve, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "k,ci,avg_err_mw,factor_distance,reference_ci")?;
    for p in &curve.points {
        writeln!(out, "{},{},{},{},{}", p.k, p.ci, p.avg_err, p.factor_distance, curve.reference_ci)?;
    }
    Ok(())
}

pub const HISTOGRAM_LIMIT: f64 = 1.2;

/// Fixed-width bins over `[−1.2, 1.2]`; bin `j` covers
/// `[−1.2 + j·w, −1.2 + (j+1)·w)` and the last bin also holds `1.2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub width: f64,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn bin_lower(&self, j: usize) -> f64 {
        -HISTOGRAM_LIMIT + j as f64 * self.width
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }
}

pub fn factor_histogram(values: &DMatrix<f64>, width: f64) -> Result<Histogram, EvalError> {
    if width.is_nan() || width <= 0.0 {
        return Err(EvalError::BinWidth(width));
    }
    let offset = (HISTOGRAM_LIMIT / width).round() as i64;
    let bins = (2 * offset) as usize;
    let mut hist = Histogram {
        width,
        counts: vec![0; bins],
        below: 0,
        above: 0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
    for &v in values.iter() {
        hist.min = hist.min.min(v);
        hist.max = hist.max.max(v);
        if v < -HISTOGRAM_LIMIT {
            hist.below += 1;
        } else if v > HISTOGRAM_LIMIT {
            hist.above += 1;
        } else {
            // Offsetting the integer index keeps 0 and ±1 on exact bin edges.
            let j = ((v / width).floor() as i64 + offset).clamp(0, bins as i64 - 1);
            hist.counts[j as usize] += 1;
        }
    }
    Ok(hist)
}

pub fn write_histogram_csv(hist: &Histogram, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "bin_lower,bin_upper,count")?;
    writeln!(out, "-inf,{},{}", -HISTOGRAM_LIMIT, hist.below)?;
    for (j, c) in hist.counts.iter().enumerate() {
        writeln!(out, "{},{},{}", hist.bin_lower(j), hist.bin_lower(j + 1), c)?;
    }
    writeln!(out, "{},inf,{}", HISTOGRAM_LIMIT, hist.above)?;
    Ok(())
}

/// Per-branch-end CSV rows for one report.
pub fn write_report_csv(report: &ErrorReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "model,branch,direction,avg_abs_err_mw,max_abs_err_mw,argmax_scenario,true_flow_at_max_mw,err_percent_at_max"
    )?;
    for e in &report.per_branch_end {
        let pct = e.err_percent_at_max.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            report.model_tag,
            e.branch,
            e.direction,
            e.avg_abs_err,
            e.max_abs_err,
            e.argmax_scenario,
            e.true_flow_at_max,
            pct
        )?;
    }
    Ok(())
}

/// Human-readable comparison table.
pub fn write_table(rows: &[TableRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<16} {:>6} {:>5} {:>8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>9}",
        "case", "N", "R", "K_train", "K_test", "LSDF avg", "LSDF max", "PTDF avg", "PTDF max", "ratio"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<16} {:>6} {:>5.2} {:>8} {:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>9.5}",
            r.case_name,
            r.n_buses,
            r.r,
            r.k_train,
            r.k_test,
            r.lsdf_avg_err,
            r.lsdf_max_err,
            r.ptdf_avg_err,
            r.ptdf_max_err,
            r.ratio
        )?;
    }
    Ok(())
}
