//! Sample file: one JSON header line, then CSV with one row per scenario:
//! `k, eta_a, p_inj (N columns, MW), p_from (L columns), p_to (L columns)`.
//! Columns follow internal bus and branch order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{SampleSet, SamplingError, SamplingMethod, Scenario};
use crate::case::NetworkCase;

const FORMAT: &str = "lsdf-samples/1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    case_name: String,
    case_hash: String,
    r: f64,
    k: usize,
    seed: u64,
    method: SamplingMethod,
    rejected_count: usize,
    n_buses: usize,
    n_branches: usize,
}

pub fn write_sample_set(
    set: &SampleSet,
    case: &NetworkCase,
    mut out: impl Write,
) -> Result<(), SamplingError> {
    let header = Header {
        format: FORMAT.to_string(),
        case_name: set.case_name.clone(),
        case_hash: set.case_hash.clone(),
        r: set.r,
        k: set.k(),
        seed: set.seed,
        method: set.method,
        rejected_count: set.rejected_count,
        n_buses: set.n_buses,
        n_branches: set.n_branches,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;

    let mut columns = vec!["k".to_string(), "eta_a".to_string()];
    columns.extend(case.buses().iter().map(|b| format!("p_inj_{}", b.external_id)));
    columns.extend((1..=set.n_branches).map(|l| format!("p_from_{l}")));
    columns.extend((1..=set.n_branches).map(|l| format!("p_to_{l}")));
    writeln!(out, "{}", columns.join(","))?;

    let mut line = String::new();
    for s in &set.scenarios {
        line.clear();
        line.push_str(&s.index.to_string());
        line.push(',');
        line.push_str(&s.eta_a.to_string());
        for v in s.p_inj.iter().chain(&s.p_branch) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn format_err(line: usize, message: impl Into<String>) -> SamplingError {
    SamplingError::Format { line, message: message.into() }
}

pub fn read_sample_set(input: impl BufRead) -> Result<SampleSet, SamplingError> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| format_err(1, "empty sample file"))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| format_err(1, e.to_string()))?;
    if header.format != FORMAT {
        return Err(format_err(1, format!("unknown format `{}`", header.format)));
    }
    let width = 2 + header.n_buses + 2 * header.n_branches;
    let columns = lines.next().ok_or_else(|| format_err(2, "missing column header"))??;
    if columns.split(',').count() != width {
        return Err(format_err(2, format!("expected {width} columns")));
    }

    let mut scenarios = Vec::with_capacity(header.k);
    for (i, line) in lines.enumerate() {
        let ln = i + 3;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(format_err(ln, format!("expected {width} fields, found {}", fields.len())));
        }
        let index = fields[0]
            .parse::<usize>()
            .map_err(|e| format_err(ln, format!("scenario index: {e}")))?;
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format_err(ln, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        scenarios.push(Scenario {
            index,
            eta_a: values[0],
            p_inj: values[1..1 + header.n_buses].to_vec(),
            p_branch: values[1 + header.n_buses..].to_vec(),
            v_mag: Vec::new(),
            theta: Vec::new(),
            load_p: Vec::new(),
            load_q: Vec::new(),
        });
    }
    if scenarios.len() != header.k {
        return Err(format_err(
            1,
            format!("header declares k = {}, file holds {} rows", header.k, scenarios.len()),
        ));
    }
    Ok(SampleSet {
        scenarios,
        r: header.r,
        seed: header.seed,
        method: header.method,
        case_name: header.case_name,
        case_hash: header.case_hash,
        rejected_count: header.rejected_count,
        n_buses: header.n_buses,
        n_branches: header.n_branches,
    })
}
