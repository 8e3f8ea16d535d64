//! Versioned text format for exogenous trajectories.
//!
//! Layout (`#` starts a comment, blank lines ignored):
//!
//! ```text
//! gridvolt-scenario v1
//! [meta]
//! grid_id = builtin:ieee13
//! seed = 7
//! dt_hours = 0.25
//! horizon = 96
//! n_bus = 12
//! n_chargers = 26
//! [chargers]
//! <charger_id> <bus_index>
//! [frames]
//! <t> <hour> <price_ch> <price_dis> <p_load * n_bus> <q_load * n_bus> <p_pv * n_bus>
//! [sessions]
//! <charger_id> <t_arrival> <t_depart> <e_arrival> <e_target> <e_min> <e_max> <p_ch_max> <p_dis_max> <soc_min_v2g>
//! ```
//!
//! Floats are written with the shortest round-trip representation, so
//! save/load is lossless and re-saving is byte-identical.

use super::{ExogenousFrame, ExogenousTrajectory, ScenarioError};
use crate::fleet::EVSession;
use std::fmt::Write as _;
use std::path::Path;

pub const SCENARIO_FORMAT_HEADER: &str = "gridvolt-scenario v1";

pub fn scenario_to_string(traj: &ExogenousTrajectory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENARIO_FORMAT_HEADER}");
    let _ = writeln!(out, "[meta]");
    let _ = writeln!(out, "grid_id = {}", traj.grid_id);
    let _ = writeln!(out, "seed = {}", traj.seed);
    let _ = writeln!(out, "dt_hours = {}", traj.dt_hours);
    let _ = writeln!(out, "horizon = {}", traj.frames.len());
    let _ = writeln!(out, "n_bus = {}", traj.n_bus);
    let _ = writeln!(out, "n_chargers = {}", traj.charger_bus.len());
    let _ = writeln!(out, "[chargers]");
    for (id, bus) in traj.charger_bus.iter().enumerate() {
        let _ = writeln!(out, "{id} {bus}");
    }
    let _ = writeln!(out, "[frames]");
    for f in &traj.frames {
        let _ = write!(out, "{} {} {} {}", f.t, f.hour, f.price_ch, f.price_dis);
        for v in f.p_load_kw.iter().chain(&f.q_load_kvar).chain(&f.p_pv_kw) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "[sessions]");
    for s in &traj.sessions {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            s.charger_id,
            s.t_arrival,
            s.t_depart,
            s.e_arrival,
            s.e_target,
            s.e_min,
            s.e_max,
            s.p_ch_max,
            s.p_dis_max,
            s.soc_min_v2g
        );
    }
    out
}

pub fn save_trajectory(traj: &ExogenousTrajectory, path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, scenario_to_string(traj))?;
    Ok(())
}

struct Cursor<'a> {
    source_name: &'a str,
    line_no: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> ScenarioError {
        ScenarioError::Parse {
            source_name: self.source_name.to_string(),
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&self, tok: &str, what: &str) -> Result<T, ScenarioError> {
        tok.parse()
            .map_err(|_| self.err(format!("cannot parse {what} from {tok:?}")))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim()
}

pub fn parse_scenario_str(
    text: &str,
    source_name: &str,
) -> Result<ExogenousTrajectory, ScenarioError> {
    let mut cur = Cursor {
        source_name,
        line_no: 0,
    };
    let mut lines = text.lines();
    // Header must be the first non-blank, non-comment line.
    let header = loop {
        cur.line_no += 1;
        match lines.next() {
            None => return Err(cur.err("missing format header")),
            Some(l) => {
                let l = strip_comment(l);
                if !l.is_empty() {
                    break l;
                }
            }
        }
    };
    if header != SCENARIO_FORMAT_HEADER {
        return Err(ScenarioError::UnsupportedVersion(header.to_string()));
    }

    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Meta,
        Chargers,
        Frames,
        Sessions,
    }
    let mut section = Section::None;

    let mut grid_id = None;
    let mut seed = None;
    let mut dt_hours = None;
    let mut horizon = None;
    let mut n_bus = None;
    let mut n_chargers = None;
    let mut charger_bus: Vec<usize> = Vec::new();
    let mut frames: Vec<ExogenousFrame> = Vec::new();
    let mut sessions: Vec<EVSession> = Vec::new();

    for raw in lines {
        cur.line_no += 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        match line {
            "[meta]" => {
                section = Section::Meta;
                continue;
            }
            "[chargers]" => {
                section = Section::Chargers;
                continue;
            }
            "[frames]" => {
                section = Section::Frames;
                continue;
            }
            "[sessions]" => {
                section = Section::Sessions;
                continue;
            }
            _ if line.starts_with('[') => {
                return Err(cur.err(format!("unknown section {line:?}")));
            }
            _ => {}
        }
        match section {
            Section::None => return Err(cur.err("content before any section")),
            Section::Meta => {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| cur.err("expected key = value"))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "grid_id" => grid_id = Some(value.to_string()),
                    "seed" => seed = Some(cur.parse::<u64>(value, "seed")?),
                    "dt_hours" => dt_hours = Some(cur.parse::<f64>(value, "dt_hours")?),
                    "horizon" => horizon = Some(cur.parse::<usize>(value, "horizon")?),
                    "n_bus" => n_bus = Some(cur.parse::<usize>(value, "n_bus")?),
                    "n_chargers" => n_chargers = Some(cur.parse::<usize>(value, "n_chargers")?),
                    _ => return Err(cur.err(format!("unknown meta key {key:?}"))),
                }
            }
            Section::Chargers => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 2 {
                    return Err(cur.err("charger rows have 2 columns: id bus"));
                }
                let id: usize = cur.parse(toks[0], "charger id")?;
                if id != charger_bus.len() {
                    return Err(cur.err(format!(
                        "charger ids must be dense and ordered; expected {}, got {id}",
                        charger_bus.len()
                    )));
                }
                charger_bus.push(cur.parse(toks[1], "bus index")?);
            }
            Section::Frames => {
                let nb = n_bus.ok_or_else(|| cur.err("n_bus must precede [frames]"))?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                let want = 4 + 3 * nb;
                if toks.len() != want {
                    return Err(cur.err(format!(
                        "frame rows have {want} columns for n_bus = {nb}, got {}",
                        toks.len()
                    )));
                }
                let t: usize = cur.parse(toks[0], "t")?;
                if t != frames.len() {
                    return Err(cur.err(format!(
                        "frame steps must be dense and ordered; expected {}, got {t}",
                        frames.len()
                    )));
                }
                let mut nums = Vec::with_capacity(want - 1);
                for tok in &toks[1..] {
                    nums.push(cur.parse::<f64>(tok, "frame value")?);
                }
                frames.push(ExogenousFrame {
                    t,
                    hour: nums[0],
                    price_ch: nums[1],
                    price_dis: nums[2],
                    p_load_kw: nums[3..3 + nb].to_vec(),
                    q_load_kvar: nums[3 + nb..3 + 2 * nb].to_vec(),
                    p_pv_kw: nums[3 + 2 * nb..3 + 3 * nb].to_vec(),
                });
            }
            Section::Sessions => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 10 {
                    return Err(cur.err("session rows have 10 columns"));
                }
                let session = EVSession {
                    charger_id: cur.parse(toks[0], "charger_id")?,
                    t_arrival: cur.parse(toks[1], "t_arrival")?,
                    t_depart: cur.parse(toks[2], "t_depart")?,
                    e_arrival: cur.parse(toks[3], "e_arrival")?,
                    e_target: cur.parse(toks[4], "e_target")?,
                    e_min: cur.parse(toks[5], "e_min")?,
                    e_max: cur.parse(toks[6], "e_max")?,
                    p_ch_max: cur.parse(toks[7], "p_ch_max")?,
                    p_dis_max: cur.parse(toks[8], "p_dis_max")?,
                    soc_min_v2g: cur.parse(toks[9], "soc_min_v2g")?,
                };
                session.validate()?;
                sessions.push(session);
            }
        }
    }

    let grid_id = grid_id.ok_or_else(|| cur.err("missing meta key grid_id"))?;
    let seed = seed.ok_or_else(|| cur.err("missing meta key seed"))?;
    let dt_hours = dt_hours.ok_or_else(|| cur.err("missing meta key dt_hours"))?;
    let horizon = horizon.ok_or_else(|| cur.err("missing meta key horizon"))?;
    let n_bus = n_bus.ok_or_else(|| cur.err("missing meta key n_bus"))?;
    let n_chargers = n_chargers.ok_or_else(|| cur.err("missing meta key n_chargers"))?;
    if frames.len() != horizon {
        return Err(cur.err(format!(
            "horizon says {horizon} frames, file holds {}",
            frames.len()
        )));
    }
    if charger_bus.len() != n_chargers {
        return Err(cur.err(format!(
            "n_chargers says {n_chargers}, file holds {}",
            charger_bus.len()
        )));
    }
    if let Some(bad) = charger_bus.iter().find(|&&b| b >= n_bus) {
        return Err(cur.err(format!("charger bus index {bad} outside 0..{n_bus}")));
    }
    for s in &sessions {
        if s.charger_id >= n_chargers {
            return Err(cur.err(format!(
                "session references charger {} of {n_chargers}",
                s.charger_id
            )));
        }
        if s.t_depart > horizon {
            return Err(cur.err(format!(
                "session departs at {} beyond horizon {horizon}",
                s.t_depart
            )));
        }
    }
    Ok(ExogenousTrajectory {
        grid_id,
        seed,
        dt_hours,
        n_bus,
        charger_bus,
        frames,
        sessions,
    })
}

pub fn load_trajectory(path: &Path) -> Result<ExogenousTrajectory, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    parse_scenario_str(&text, &name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    fn sample() -> ExogenousTrajectory {
        generate_scenario(&ScenarioConfig::default(), 7).unwrap()
    }

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let traj = sample();
        let text = scenario_to_string(&traj);
        let back = parse_scenario_str(&text, "mem").unwrap();
        assert_eq!(traj, back);
        assert_eq!(text, scenario_to_string(&back), "re-save not byte-identical");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.scn");
        let traj = sample();
        save_trajectory(&traj, &path).unwrap();
        assert_eq!(load_trajectory(&path).unwrap(), traj);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = parse_scenario_str("gridvolt-scenario v0\n", "mem").unwrap_err();
        assert!(matches!(err, ScenarioError::UnsupportedVersion(_)));
    }

    #[test]
    fn truncated_file_is_rejected_with_context() {
        let traj = sample();
        let text = scenario_to_string(&traj);
        // Chop the file in the middle of the frames table.
        let cut: String = text.lines().take(30).collect::<Vec<_>>().join("\n");
        let err = parse_scenario_str(&cut, "mem").unwrap_err();
        match err {
            ScenarioError::Parse { source_name, .. } => assert_eq!(source_name, "mem"),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn corrupt_frame_value_reports_line() {
        let traj = sample();
        let text = scenario_to_string(&traj);
        let bad = text.replacen("[frames]\n0 ", "[frames]\n0 oops", 1);
        let err = parse_scenario_str(&bad, "mem").unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert!(line > 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn session_beyond_horizon_is_rejected() {
        let mut traj = sample();
        traj.sessions[0].t_depart = traj.frames.len() + 5;
        let text = scenario_to_string(&traj);
        assert!(parse_scenario_str(&text, "mem").is_err());
    }
}
