use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;

use super::{BusKind, NetworkCase};

/// One broken invariant. Branch numbers are 1-based row positions; bus
/// numbers are external ids.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoSlack,
    MultipleSlack { buses: Vec<u64> },
    Disconnected { buses: Vec<u64> },
    SelfLoop { branch: usize },
    ZeroReactance { branch: usize },
    NonPositiveTap { branch: usize },
    PhaseShift { branch: usize },
    NonFiniteLoad { bus: u64 },
    NonPositiveVoltage { bus: u64 },
    MissingGenerator { bus: u64 },
    NonPositiveBase,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSlack => write!(f, "no slack bus"),
            Violation::MultipleSlack { buses } => write!(f, "multiple slack buses: {buses:?}"),
            Violation::Disconnected { buses } => {
                write!(f, "disconnected buses (unreachable from the slack): {buses:?}")
            }
            Violation::SelfLoop { branch } => write!(f, "branch {branch} connects a bus to itself"),
            Violation::ZeroReactance { branch } => {
                write!(f, "branch {branch} is in service with zero reactance")
            }
            Violation::NonPositiveTap { branch } => write!(f, "branch {branch} has tap <= 0"),
            Violation::PhaseShift { branch } => {
                write!(f, "branch {branch} is an in-service phase shifter")
            }
            Violation::NonFiniteLoad { bus } => write!(f, "bus {bus} has a non-finite load"),
            Violation::NonPositiveVoltage { bus } => write!(f, "bus {bus} has v_init <= 0"),
            Violation::MissingGenerator { bus } => {
                write!(f, "slack/PV bus {bus} has no in-service generator")
            }
            Violation::NonPositiveBase => write!(f, "base MVA must be positive"),
        }
    }
}

/// Checks every case invariant. An empty list means the case is usable.
pub fn validate(case: &NetworkCase) -> Vec<Violation> {
    let mut out = Vec::new();
    if case.base_mva().is_nan() || case.base_mva() <= 0.0 {
        out.push(Violation::NonPositiveBase);
    }

    let slacks: Vec<u64> = case
        .buses()
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.external_id)
        .collect();
    match slacks.len() {
        0 => out.push(Violation::NoSlack),
        1 => {}
        _ => out.push(Violation::MultipleSlack { buses: slacks }),
    }

    let mut has_gen = vec![false; case.n_buses()];
    for g in case.generators().iter().filter(|g| g.in_service) {
        has_gen[g.bus] = true;
    }
    for (i, bus) in case.buses().iter().enumerate() {
        if !bus.p_load_max.is_finite() || !bus.q_load_max.is_finite() {
            out.push(Violation::NonFiniteLoad { bus: bus.external_id });
        }
        if bus.v_init.is_nan() || bus.v_init <= 0.0 {
            out.push(Violation::NonPositiveVoltage { bus: bus.external_id });
        }
        if bus.kind != BusKind::Pq && !has_gen[i] {
            out.push(Violation::MissingGenerator { bus: bus.external_id });
        }
    }

    for (l, br) in case.branches().iter().enumerate() {
        let branch = l + 1;
        if br.from_bus == br.to_bus {
            out.push(Violation::SelfLoop { branch });
        }
        if br.tap.is_nan() || br.tap <= 0.0 {
            out.push(Violation::NonPositiveTap { branch });
        }
        if br.in_service && br.x == 0.0 {
            out.push(Violation::ZeroReactance { branch });
        }
        if br.in_service && br.shift != 0.0 {
            out.push(Violation::PhaseShift { branch });
        }
    }

    let unreachable = unreachable_buses(case, case.slack_bus().unwrap_or(0));
    if !unreachable.is_empty() {
        out.push(Violation::Disconnected {
            buses: unreachable.into_iter().map(|i| case.external_id(i)).collect(),
        });
    }
    out
}

/// Internal indices of buses with no in-service path to `root`.
pub(crate) fn unreachable_buses(case: &NetworkCase, root: usize) -> Vec<usize> {
    let n = case.n_buses();
    if n == 0 {
        return Vec::new();
    }
    let mut adj = vec![Vec::new(); n];
    for br in case.branches().iter().filter(|b| b.in_service) {
        adj[br.from_bus].push(br.to_bus);
        adj[br.to_bus].push(br.from_bus);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}
