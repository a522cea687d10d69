use serde::{Deserialize, Serialize};

use super::{Branch, Bus, BusKind, CaseError, Generator, NetworkCase};

/// Canonical JSON layout of a case. Bus references use external ids so
/// hand-written files stay readable; units match the in-memory model
/// (loads in MW/MVAr, shunts and impedances in p.u., angles in radians).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub generators: Vec<GeneratorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: u64,
    pub kind: BusKind,
    #[serde(default)]
    pub p_load_max: f64,
    #[serde(default)]
    pub q_load_max: f64,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
    #[serde(default = "one")]
    pub v_init: f64,
    #[serde(default)]
    pub theta_init: f64,
    #[serde(default)]
    pub base_kv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: u64,
    pub to: u64,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default = "one")]
    pub tap: f64,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub transformer: bool,
    #[serde(default = "yes")]
    pub in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub bus: u64,
    #[serde(default)]
    pub p_set: f64,
    #[serde(default)]
    pub q_set: f64,
    #[serde(default = "one")]
    pub v_set: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl CaseDocument {
    pub fn from_case(case: &NetworkCase) -> Self {
        let ext = |i: usize| case.external_id(i);
        CaseDocument {
            name: case.name().to_string(),
            base_mva: case.base_mva(),
            buses: case
                .buses()
                .iter()
                .map(|b| BusRecord {
                    id: b.external_id,
                    kind: b.kind,
                    p_load_max: b.p_load_max,
                    q_load_max: b.q_load_max,
                    shunt_g: b.shunt_g,
                    shunt_b: b.shunt_b,
                    v_init: b.v_init,
                    theta_init: b.theta_init,
                    base_kv: b.base_kv,
                })
                .collect(),
            branches: case
                .branches()
                .iter()
                .map(|b| BranchRecord {
                    from: ext(b.from_bus),
                    to: ext(b.to_bus),
                    r: b.r,
                    x: b.x,
                    b: b.b_charging,
                    tap: b.tap,
                    shift: b.shift,
                    transformer: b.is_transformer,
                    in_service: b.in_service,
                })
                .collect(),
            generators: case
                .generators()
                .iter()
                .map(|g| GeneratorRecord {
                    bus: ext(g.bus),
                    p_set: g.p_set,
                    q_set: g.q_set,
                    v_set: g.v_set,
                    in_service: g.in_service,
                })
                .collect(),
        }
    }

    pub fn into_case(self) -> Result<NetworkCase, CaseError> {
        let mut ids = std::collections::HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if ids.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
        }
        let lookup = |id: u64| {
            ids.get(&id)
                .copied()
                .ok_or(CaseError::UnknownBus { id, line: None })
        };
        let branches = self
            .branches
            .iter()
            .map(|b| {
                Ok(Branch {
                    from_bus: lookup(b.from)?,
                    to_bus: lookup(b.to)?,
                    r: b.r,
                    x: b.x,
                    b_charging: b.b,
                    tap: b.tap,
                    shift: b.shift,
                    is_transformer: b.transformer || b.tap != 1.0,
                    in_service: b.in_service,
                })
            })
            .collect::<Result<Vec<_>, CaseError>>()?;
        let generators = self
            .generators
            .iter()
            .map(|g| {
                Ok(Generator {
                    bus: lookup(g.bus)?,
                    p_set: g.p_set,
                    q_set: g.q_set,
                    v_set: g.v_set,
                    in_service: g.in_service,
                })
            })
            .collect::<Result<Vec<_>, CaseError>>()?;
        let buses = self
            .buses
            .into_iter()
            .map(|b| Bus {
                external_id: b.id,
                kind: b.kind,
                p_load_max: b.p_load_max,
                q_load_max: b.q_load_max,
                shunt_g: b.shunt_g,
                shunt_b: b.shunt_b,
                v_init: b.v_init,
                theta_init: b.theta_init,
                base_kv: b.base_kv,
            })
            .collect();
        NetworkCase::new(self.name, self.base_mva, buses, branches, generators)
    }
}
