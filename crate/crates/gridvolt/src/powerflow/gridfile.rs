//! The `gridvolt-grid v1` text format and the bundled feeder files.
//!
//! Layout: a version header line, then `[base]`, `[buses]`, `[lines]`
//! sections. `#` starts a comment, blank lines are ignored. Bus rows are
//! `name type` with type `slack` or `pq`; line rows are `from to r_pu x_pu`.
//! Z and L are always derived by [`super::build_grid`], never read from the
//! file, so a file can never carry an inconsistent reduction.

use std::path::Path;

use super::{build_grid, BaseQuantities, BusKind, BusRecord, GridModel, LineRecord, PfError};

pub const GRID_FORMAT_HEADER: &str = "gridvolt-grid v1";

/// Bundled positive-sequence test feeders, by name.
pub fn builtin_grid(name: &str) -> Option<&'static str> {
    match name {
        "case2" => Some(include_str!("../../data/case2.grid")),
        "ieee13" => Some(include_str!("../../data/ieee13.grid")),
        "ieee34" => Some(include_str!("../../data/ieee34.grid")),
        "ieee123" => Some(include_str!("../../data/ieee123.grid")),
        _ => None,
    }
}

pub const BUILTIN_GRID_NAMES: [&str; 4] = ["case2", "ieee13", "ieee34", "ieee123"];

/// Parse and build a grid from file contents. `source_name` labels errors.
pub fn parse_grid_str(contents: &str, source_name: &str) -> Result<GridModel, PfError> {
    let err = |line: usize, msg: String| PfError::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };

    let mut lines_iter = contents.lines().enumerate();
    let header = loop {
        match lines_iter.next() {
            Some((no, raw)) => {
                let t = strip_comment(raw);
                if t.is_empty() {
                    continue;
                }
                break (no + 1, t.to_string());
            }
            None => return Err(err(0, "empty file, expected version header".into())),
        }
    };
    if header.1 != GRID_FORMAT_HEADER {
        return Err(PfError::UnsupportedVersion(header.1));
    }

    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Base,
        Buses,
        Lines,
    }
    let mut section = Section::None;
    let mut base = BaseQuantities::default();
    let mut saw_v_base = false;
    let mut saw_s_base = false;
    let mut buses: Vec<BusRecord> = Vec::new();
    let mut line_records: Vec<LineRecord> = Vec::new();

    for (no, raw) in lines_iter {
        let line_no = no + 1;
        let t = strip_comment(raw);
        if t.is_empty() {
            continue;
        }
        match t {
            "[base]" => {
                section = Section::Base;
                continue;
            }
            "[buses]" => {
                section = Section::Buses;
                continue;
            }
            "[lines]" => {
                section = Section::Lines;
                continue;
            }
            _ if t.starts_with('[') => {
                return Err(err(line_no, format!("unknown section {t:?}")));
            }
            _ => {}
        }
        match section {
            Section::None => {
                return Err(err(line_no, "content before any section header".into()));
            }
            Section::Base => {
                let (key, value) = t
                    .split_once('=')
                    .ok_or_else(|| err(line_no, format!("expected key = value, got {t:?}")))?;
                let key = key.trim();
                let value: f64 = value.trim().parse().map_err(|e| {
                    err(line_no, format!("bad numeric value for {key:?}: {e}"))
                })?;
                match key {
                    "v_base_kv" => {
                        base.v_base_v = value * 1e3;
                        saw_v_base = true;
                    }
                    "s_base_mva" => {
                        base.s_base_va = value * 1e6;
                        saw_s_base = true;
                    }
                    "max_injection_pu" => base.max_injection_pu = value,
                    _ => return Err(err(line_no, format!("unknown base key {key:?}"))),
                }
            }
            Section::Buses => {
                let mut parts = t.split_whitespace();
                let name = parts.next().unwrap().to_string();
                let kind = match parts.next() {
                    Some("slack") => BusKind::Slack,
                    Some("pq") => BusKind::Pq,
                    Some(other) => {
                        return Err(err(line_no, format!("unknown bus type {other:?}")));
                    }
                    None => return Err(err(line_no, "bus row needs `name type`".into())),
                };
                if parts.next().is_some() {
                    return Err(err(line_no, "trailing fields on bus row".into()));
                }
                buses.push(BusRecord { name, kind });
            }
            Section::Lines => {
                let parts: Vec<&str> = t.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(err(
                        line_no,
                        format!("line row needs `from to r_pu x_pu`, got {} fields", parts.len()),
                    ));
                }
                let r_pu: f64 = parts[2]
                    .parse()
                    .map_err(|e| err(line_no, format!("bad r_pu: {e}")))?;
                let x_pu: f64 = parts[3]
                    .parse()
                    .map_err(|e| err(line_no, format!("bad x_pu: {e}")))?;
                if !r_pu.is_finite() || !x_pu.is_finite() {
                    return Err(err(line_no, "non-finite impedance".into()));
                }
                line_records.push(LineRecord {
                    from: parts[0].to_string(),
                    to: parts[1].to_string(),
                    r_pu,
                    x_pu,
                });
            }
        }
    }
    if !saw_v_base || !saw_s_base {
        return Err(err(0, "missing [base] v_base_kv or s_base_mva".into()));
    }
    if buses.is_empty() {
        return Err(err(0, "no [buses] section content".into()));
    }
    if line_records.is_empty() {
        return Err(err(0, "no [lines] section content".into()));
    }
    build_grid(&buses, &line_records, base)
}

/// Load a grid from disk, or from the bundled set via `builtin:<name>`.
pub fn load_grid(path: &str) -> Result<GridModel, PfError> {
    if let Some(name) = path.strip_prefix("builtin:") {
        let contents = builtin_grid(name).ok_or_else(|| PfError::Topology(format!(
            "unknown builtin grid {name:?} (have: {})",
            BUILTIN_GRID_NAMES.join(", ")
        )))?;
        return parse_grid_str(contents, path);
    }
    let contents = std::fs::read_to_string(Path::new(path))?;
    parse_grid_str(&contents, path)
}

fn strip_comment(raw: &str) -> &str {
    match raw.find('#') {
        Some(i) => raw[..i].trim(),
        None => raw.trim(),
    }
}
