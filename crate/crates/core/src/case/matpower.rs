//! Reader for the MATPOWER case-file subset: `mpc.baseMVA`, `mpc.bus`,
//! `mpc.gen` and `mpc.branch`. Other `mpc.*` matrices and cell arrays are
//! skipped.

use std::collections::HashMap;

use super::{Branch, Bus, BusKind, CaseError, Generator, NetworkCase};

struct Row {
    line: usize,
    values: Vec<f64>,
}

#[derive(Default)]
struct RawCase {
    name: Option<String>,
    base_mva: Option<f64>,
    tables: HashMap<String, Vec<Row>>,
}

fn syntax(line: usize, message: impl Into<String>) -> CaseError {
    CaseError::Syntax { line, message: message.into() }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_number(token: &str, line: usize) -> Result<f64, CaseError> {
    token
        .parse::<f64>()
        .map_err(|_| syntax(line, format!("invalid number `{token}`")))
}

/// Splits a fragment of matrix body into rows; returns true once `]` is seen.
fn push_matrix_fragment(
    fragment: &str,
    line: usize,
    rows: &mut Vec<Row>,
    current: &mut Vec<f64>,
) -> Result<bool, CaseError> {
    let (body, closed) = match fragment.find(']') {
        Some(i) => (&fragment[..i], true),
        None => (fragment, false),
    };
    for (k, piece) in body.split(';').enumerate() {
        if k > 0 && !current.is_empty() {
            rows.push(Row { line, values: std::mem::take(current) });
        }
        for token in piece.split(|c: char| c.is_whitespace() || c == ',') {
            if !token.is_empty() {
                current.push(parse_number(token, line)?);
            }
        }
    }
    // A newline also ends a row.
    if !current.is_empty() {
        rows.push(Row { line, values: std::mem::take(current) });
    }
    if closed {
        let rest = fragment[fragment.find(']').unwrap() + 1..].trim();
        if !rest.is_empty() && rest != ";" {
            return Err(syntax(line, format!("unexpected `{rest}` after matrix")));
        }
    }
    Ok(closed)
}

fn scan(text: &str) -> Result<RawCase, CaseError> {
    let mut raw = RawCase::default();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut saw_content = false;

    while let Some((ln, line)) = lines.next() {
        let code = strip_comment(line).trim();
        if code.is_empty() {
            continue;
        }
        saw_content = true;
        if let Some(rest) = code.strip_prefix("function") {
            if let Some((_, name)) = rest.split_once('=') {
                raw.name = Some(name.trim().trim_end_matches(';').to_string());
            }
            continue;
        }
        let Some(assign) = code.strip_prefix("mpc.") else {
            return Err(syntax(ln, format!("unexpected statement `{code}`")));
        };
        let Some((field, value)) = assign.split_once('=') else {
            return Err(syntax(ln, "expected `=` in assignment"));
        };
        let field = field.trim().to_string();
        let value = value.trim();

        if let Some(body) = value.strip_prefix('[') {
            let mut rows = Vec::new();
            let mut current = Vec::new();
            let mut closed = push_matrix_fragment(body, ln, &mut rows, &mut current)?;
            while !closed {
                let Some((ln, line)) = lines.next() else {
                    return Err(syntax(ln, format!("unterminated matrix `mpc.{field}`")));
                };
                closed = push_matrix_fragment(strip_comment(line), ln, &mut rows, &mut current)?;
            }
            raw.tables.insert(field, rows);
        } else if value.starts_with('{') {
            let mut closed = value.contains('}');
            while !closed {
                let Some((_, line)) = lines.next() else {
                    return Err(syntax(ln, format!("unterminated cell array `mpc.{field}`")));
                };
                closed = strip_comment(line).contains('}');
            }
        } else if field == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            raw.base_mva = Some(parse_number(v, ln)?);
        } else if field == "version" {
            let v = value.trim_end_matches(';').trim().trim_matches('\'');
            if v != "2" {
                return Err(CaseError::Unsupported {
                    line: ln,
                    message: format!("case format version {v}, only version 2 is read"),
                });
            }
        }
    }
    if !saw_content {
        return Err(syntax(1, "empty case file"));
    }
    Ok(raw)
}

fn require_columns(row: &Row, n: usize, table: &str) -> Result<(), CaseError> {
    if row.values.len() < n {
        return Err(syntax(
            row.line,
            format!("{table} row has {} columns, expected at least {n}", row.values.len()),
        ));
    }
    Ok(())
}

fn bus_id(v: f64, line: usize) -> Result<u64, CaseError> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(syntax(line, format!("bus id {v} is not a non-negative integer")));
    }
    Ok(v as u64)
}

/// Parses MATPOWER case text. Loads are read as the max-load profile;
/// out-of-service branches are kept and flagged.
pub fn parse_matpower(text: &str, default_name: &str) -> Result<NetworkCase, CaseError> {
    let mut raw = scan(text)?;
    let base_mva = raw.base_mva.ok_or(CaseError::MissingTable("baseMVA"))?;
    let bus_rows = raw.tables.remove("bus").ok_or(CaseError::MissingTable("bus"))?;
    let branch_rows = raw.tables.remove("branch").ok_or(CaseError::MissingTable("branch"))?;
    let gen_rows = raw.tables.remove("gen").ok_or(CaseError::MissingTable("gen"))?;

    let mut index = HashMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        require_columns(row, 10, "bus")?;
        let v = &row.values;
        let id = bus_id(v[0], row.line)?;
        let kind = match v[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => {
                return Err(CaseError::Unsupported {
                    line: row.line,
                    message: format!("isolated bus {id} (type 4)"),
                })
            }
            t => return Err(syntax(row.line, format!("unknown bus type {t}"))),
        };
        if index.insert(id, buses.len()).is_some() {
            return Err(CaseError::DuplicateBus(id));
        }
        buses.push(Bus {
            external_id: id,
            kind,
            p_load_max: v[2],
            q_load_max: v[3],
            shunt_g: v[4] / base_mva,
            shunt_b: v[5] / base_mva,
            v_init: v[7],
            theta_init: v[8].to_radians(),
            base_kv: v[9],
        });
    }

    let lookup = |v: f64, line: usize| -> Result<usize, CaseError> {
        let id = bus_id(v, line)?;
        index.get(&id).copied().ok_or(CaseError::UnknownBus { id, line: Some(line) })
    };

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in &branch_rows {
        require_columns(row, 11, "branch")?;
        let v = &row.values;
        let ratio = v[8];
        let in_service = v[10] != 0.0;
        if in_service && v[9] != 0.0 {
            return Err(CaseError::Unsupported {
                line: row.line,
                message: format!("phase shift {} deg on an in-service branch", v[9]),
            });
        }
        branches.push(Branch {
            from_bus: lookup(v[0], row.line)?,
            to_bus: lookup(v[1], row.line)?,
            r: v[2],
            x: v[3],
            b_charging: v[4],
            tap: if ratio == 0.0 { 1.0 } else { ratio },
            shift: v[9].to_radians(),
            is_transformer: ratio != 0.0,
            in_service,
        });
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    for row in &gen_rows {
        require_columns(row, 8, "gen")?;
        let v = &row.values;
        generators.push(Generator {
            bus: lookup(v[0], row.line)?,
            p_set: v[1],
            q_set: v[2],
            v_set: v[5],
            in_service: v[7] > 0.0,
        });
    }

    let name = raw.name.unwrap_or_else(|| default_name.to_string());
    NetworkCase::new(name, base_mva, buses, branches, generators)
}
