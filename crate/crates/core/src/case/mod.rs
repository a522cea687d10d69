//! Network data model: buses, branches, generators and the case container.
//!
//! All arithmetic uses dense internal bus indices `0..N`. External bus ids
//! from the case file are kept on [`Bus::external_id`] for reporting only.

mod json;
mod matpower;
pub(crate) mod validate;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use json::CaseDocument;
pub use matpower::parse_matpower;
pub use validate::{validate, Violation};

/// Errors raised while reading or constructing a case.
#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required table `{0}`")]
    MissingTable(&'static str),
    #[error("duplicate bus id {0}")]
    DuplicateBus(u64),
    #[error("reference to unknown bus {id}{}", line_suffix(*.line))]
    UnknownBus { id: u64, line: Option<usize> },
    #[error("unsupported input at line {line}: {message}")]
    Unsupported { line: usize, message: String },
    #[error("invalid JSON case: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub external_id: u64,
    pub kind: BusKind,
    /// Active max-load, MW.
    pub p_load_max: f64,
    /// Reactive max-load, MVAr.
    pub q_load_max: f64,
    /// Shunt conductance, p.u. on the system base.
    pub shunt_g: f64,
    /// Shunt susceptance, p.u. on the system base.
    pub shunt_b: f64,
    pub v_init: f64,
    /// Radians.
    pub theta_init: f64,
    pub base_kv: f64,
}

/// A π-model branch. `from_bus` and `to_bus` are internal indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, p.u.
    pub b_charging: f64,
    /// Off-nominal turns ratio; 1.0 for plain lines.
    pub tap: f64,
    /// Phase shift, radians.
    pub shift: f64,
    pub is_transformer: bool,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// Internal bus index.
    pub bus: usize,
    /// MW
    pub p_set: f64,
    /// MVAr
    pub q_set: f64,
    pub v_set: f64,
    pub in_service: bool,
}

/// Immutable network model with a dense internal bus index.
#[derive(Debug, Clone)]
pub struct NetworkCase {
    name: String,
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
    index: HashMap<u64, usize>,
    hash: String,
}

impl PartialEq for NetworkCase {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
            && self.generators == other.generators
    }
}

impl NetworkCase {
    /// Builds a case, checking that bus ids are unique and that every branch
    /// and generator refers to an existing internal index.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Result<Self, CaseError> {
        let mut index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.external_id, i).is_some() {
                return Err(CaseError::DuplicateBus(bus.external_id));
            }
        }
        let n = buses.len();
        let bad_ref = |i: usize| CaseError::UnknownBus { id: i as u64, line: None };
        for br in &branches {
            if br.from_bus >= n {
                return Err(bad_ref(br.from_bus));
            }
            if br.to_bus >= n {
                return Err(bad_ref(br.to_bus));
            }
        }
        if let Some(g) = generators.iter().find(|g| g.bus >= n) {
            return Err(bad_ref(g.bus));
        }
        let mut case = NetworkCase {
            name: name.into(),
            base_mva,
            buses,
            branches,
            generators,
            index,
            hash: String::new(),
        };
        let digest = Sha256::digest(case.to_json().as_bytes());
        case.hash = hex::encode(digest);
        Ok(case)
    }

    /// Reads a case from disk. Text starting with `{` is read as the
    /// canonical JSON schema, anything else as a MATPOWER case file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CaseError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CaseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".to_string());
        Self::parse(&text, &stem)
    }

    /// Parses case text, choosing the format by content.
    pub fn parse(text: &str, default_name: &str) -> Result<Self, CaseError> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            parse_matpower(text, default_name)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CaseError> {
        let doc: CaseDocument =
            serde_json::from_str(text).map_err(|e| CaseError::Json(e.to_string()))?;
        doc.into_case()
    }

    /// Canonical JSON serialization.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CaseDocument::from_case(self))
            .expect("case document serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn bus_index(&self, external_id: u64) -> Option<usize> {
        self.index.get(&external_id).copied()
    }

    pub fn external_id(&self, index: usize) -> u64 {
        self.buses[index].external_id
    }

    /// Internal index of the (first) slack bus.
    pub fn slack_bus(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Per-bus active max-load, MW.
    pub fn max_loads_p(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.p_load_max).collect()
    }

    pub fn max_loads_q(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.q_load_max).collect()
    }

    /// Generator set-points as given in the case, MW.
    pub fn generator_setpoints(&self) -> Vec<f64> {
        self.generators.iter().map(|g| g.p_set).collect()
    }

    /// Buses adjacent to `bus` through in-service branches.
    pub fn neighbors(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        self.branches.iter().filter(|b| b.in_service).filter_map(move |b| {
            if b.from_bus == bus {
                Some(b.to_bus)
            } else if b.to_bus == bus {
                Some(b.from_bus)
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchClass {
    Line,
    Transformer,
}

/// Mean electrical parameters of one class of in-service branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParamSummary {
    pub class: BranchClass,
    pub count: usize,
    pub mean_r: f64,
    pub mean_x: f64,
    pub mean_b: f64,
    /// `mean_x / mean_r`; absent when the class has zero mean resistance.
    pub mean_x_over_r: Option<f64>,
}

/// Average r, x, b of in-service branches split into lines and transformers.
/// Classes without members are omitted.
pub fn branch_parameter_summary(case: &NetworkCase) -> Vec<BranchParamSummary> {
    [BranchClass::Line, BranchClass::Transformer]
        .into_iter()
        .filter_map(|class| {
            let members: Vec<&Branch> = case
                .branches()
                .iter()
                .filter(|b| b.in_service && b.is_transformer == (class == BranchClass::Transformer))
                .collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as f64;
            let mean = |f: fn(&Branch) -> f64| members.iter().map(|b| f(b)).sum::<f64>() / n;
            let mean_r = mean(|b| b.r);
            let mean_x = mean(|b| b.x);
            Some(BranchParamSummary {
                class,
                count: members.len(),
                mean_r,
                mean_x,
                mean_b: mean(|b| b.b_charging),
                mean_x_over_r: (mean_r != 0.0).then(|| mean_x / mean_r),
            })
        })
        .collect()
}

/// Case files shipped with the crate, by name.
pub fn builtin_case_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "case2" => include_str!("../../../../cases/case2.json"),
        "case5" => include_str!("../../../../cases/case5.m"),
        "case14" => include_str!("../../../../cases/case14.m"),
        "case24_ieee_rts" | "case24" => include_str!("../../../../cases/case24_ieee_rts.m"),
        "case30" => include_str!("../../../../cases/case30.m"),
        "case57" => include_str!("../../../../cases/case57.m"),
        "case118" => include_str!("../../../../cases/case118.m"),
        "case300" => include_str!("../../../../cases/case300.m"),
        _ => return None,
    })
}

/// Loads one of the bundled cases.
pub fn builtin_case(name: &str) -> Option<Result<NetworkCase, CaseError>> {
    let canonical = if name == "case24" { "case24_ieee_rts" } else { name };
    builtin_case_text(name).map(|text| NetworkCase::parse(text, canonical))
}

pub const BUILTIN_CASES: &[&str] = &[
    "case2",
    "case5",
    "case14",
    "case24_ieee_rts",
    "case30",
    "case57",
    "case118",
    "case300",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn line(from: usize, to: usize, r: f64, x: f64, b: f64, transformer: bool) -> Branch {
        Branch {
            from_bus: from,
            to_bus: to,
            r,
            x,
            b_charging: b,
            tap: 1.0,
            shift: 0.0,
            is_transformer: transformer,
            in_service: true,
        }
    }

    fn pq(id: u64) -> Bus {
        Bus {
            external_id: id,
            kind: BusKind::Pq,
            p_load_max: 0.0,
            q_load_max: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
            v_init: 1.0,
            theta_init: 0.0,
            base_kv: 0.0,
        }
    }

    #[test]
    fn duplicate_bus_rejected() {
        let err = NetworkCase::new("d", 100.0, vec![pq(1), pq(1)], vec![], vec![]).unwrap_err();
        assert!(matches!(err, CaseError::DuplicateBus(1)));
    }

    #[test]
    fn out_of_range_branch_rejected() {
        let err = NetworkCase::new("d", 100.0, vec![pq(1)], vec![line(0, 3, 0.0, 0.1, 0.0, false)], vec![])
            .unwrap_err();
        assert!(matches!(err, CaseError::UnknownBus { .. }));
    }

    #[test]
    fn summary_single_branch_is_exact() {
        let case = NetworkCase::new(
            "s",
            100.0,
            vec![pq(1), pq(2)],
            vec![line(0, 1, 0.02, 0.08, 0.01, false)],
            vec![],
        )
        .unwrap();
        let s = branch_parameter_summary(&case);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].class, BranchClass::Line);
        assert_eq!(s[0].count, 1);
        assert_eq!((s[0].mean_r, s[0].mean_x, s[0].mean_b), (0.02, 0.08, 0.01));
        assert_eq!(s[0].mean_x_over_r, Some(0.08 / 0.02));
    }

    #[test]
    fn summary_splits_classes_and_skips_out_of_service() {
        let mut off = line(0, 2, 1.0, 1.0, 1.0, false);
        off.in_service = false;
        let case = NetworkCase::new(
            "s",
            100.0,
            vec![pq(1), pq(2), pq(3)],
            vec![
                line(0, 1, 0.01, 0.1, 0.0, false),
                line(1, 2, 0.0, 0.05, 0.0, true),
                off,
            ],
            vec![],
        )
        .unwrap();
        let s = branch_parameter_summary(&case);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].count, 1);
        assert_eq!(s[1].class, BranchClass::Transformer);
        assert_eq!(s[1].mean_x_over_r, None);
    }

    #[test]
    fn builtin_cases_parse() {
        for name in BUILTIN_CASES {
            let case = builtin_case(name).unwrap().unwrap();
            assert!(case.n_buses() >= 2, "{name}");
            assert!(case.slack_bus().is_some(), "{name}");
        }
    }
}
