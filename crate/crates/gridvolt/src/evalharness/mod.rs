//! Episode evaluation and reporting: the per-episode metric suite, greedy
//! multi-scenario aggregation with mean and spread, an exhaustive planning
//! oracle for tiny instances, and CSV/JSON emission with lossless float
//! formatting. Every metric is recomputable from the exported trace by an
//! independent parser, and a test holds the two paths bit-equal.

use crate::agents::{Agent, AgentError, CurvePoint};
use crate::env::{Env, EnvConfig, EnvError, PfMode, RewardConfig};
use crate::powerflow::GridModel;
use crate::scenario::ExogenousTrajectory;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

pub const SUMMARY_SCHEMA: &str = "gridvolt-summary v1";
/// Exhaustive search refuses above this many candidate plans.
pub const MAX_PLANS: f64 = 1e7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("search space has {plans:.3e} plans, above the {max:.0e} bound; reduce levels, chargers, or horizon")]
    SearchTooLarge { plans: f64, max: f64 },
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Episode scorecard. Violation metrics use the inclusive band boundary:
/// |v| = 0.95 is not a violation, matching a band term that is zero there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Net trading spend in EUR (negative means net revenue).
    pub cost_eur: f64,
    /// Mean over departed EVs of min(1, delivered/target) in percent; EVs
    /// still connected at the horizon are scored by their final SoC. 100
    /// when the episode has no EVs.
    pub satisfaction_pct: f64,
    /// Bus-step pairs with |v| outside the band.
    pub vv_per_bus: u64,
    /// Steps with at least one violating bus.
    pub vv_per_step: u64,
    /// Sum of absolute per-unit violation magnitudes over all bus-steps.
    pub vv_pu: f64,
    pub energy_charged_mwh: f64,
    pub energy_discharged_mwh: f64,
    /// Mean wall-clock seconds per environment step, excluding trace I/O.
    /// The only field exempt from determinism and recount checks.
    pub step_time_sec: f64,
    /// True when the episode ended early in a diverged power flow; the
    /// metrics then cover only the simulated prefix.
    pub partial: bool,
}

pub const METRIC_NAMES: [&str; 8] = [
    "cost_eur",
    "satisfaction_pct",
    "vv_per_bus",
    "vv_per_step",
    "vv_pu",
    "energy_charged_mwh",
    "energy_discharged_mwh",
    "step_time_sec",
];

impl EpisodeMetrics {
    pub fn named_values(&self) -> [(&'static str, f64); 8] {
        [
            ("cost_eur", self.cost_eur),
            ("satisfaction_pct", self.satisfaction_pct),
            ("vv_per_bus", self.vv_per_bus as f64),
            ("vv_per_step", self.vv_per_step as f64),
            ("vv_pu", self.vv_pu),
            ("energy_charged_mwh", self.energy_charged_mwh),
            ("energy_discharged_mwh", self.energy_discharged_mwh),
            ("step_time_sec", self.step_time_sec),
        ]
    }
}

/// One recorded step. Departure events carry (charger, delivered kWh,
/// target kWh) so satisfaction is recountable from the trace alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub dt_hours: f64,
    pub reward: f64,
    pub cost_eur: f64,
    pub price_ch: f64,
    pub price_dis: f64,
    pub diverged: bool,
    pub v_mag: Vec<f64>,
    pub p_ch_kw: Vec<f64>,
    pub p_dis_kw: Vec<f64>,
    pub soc: Vec<f64>,
    pub departed: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub agent: String,
    pub scenario_seed: u64,
    pub n_bus: usize,
    pub n_chargers: usize,
    pub rows: Vec<TraceRow>,
}

fn violation_excess(v: f64, band: f64) -> f64 {
    let dev = (1.0 - v).abs();
    let excess = dev - band;
    if excess > 0.0 {
        excess
    } else {
        0.0
    }
}

fn metrics_from_rows(rows: &[TraceRow], band: f64) -> EpisodeMetrics {
    let mut cost_eur = 0.0;
    let mut vv_per_bus = 0u64;
    let mut vv_per_step = 0u64;
    let mut vv_pu = 0.0;
    let mut charged = 0.0;
    let mut discharged = 0.0;
    let mut sat_sum = 0.0;
    let mut sat_n = 0u64;
    let mut partial = false;
    for row in rows {
        partial |= row.diverged;
        let mut step_cost = 0.0;
        for (pc, pd) in row.p_ch_kw.iter().zip(&row.p_dis_kw) {
            step_cost += row.price_ch * pc - row.price_dis * pd;
        }
        cost_eur += row.dt_hours * step_cost;
        let mut step_hit = false;
        for &v in &row.v_mag {
            let excess = violation_excess(v, band);
            if excess > 0.0 {
                vv_per_bus += 1;
                vv_pu += excess;
                step_hit = true;
            }
        }
        if step_hit {
            vv_per_step += 1;
        }
        let mut ch_sum = 0.0;
        let mut dis_sum = 0.0;
        for (pc, pd) in row.p_ch_kw.iter().zip(&row.p_dis_kw) {
            ch_sum += pc;
            dis_sum += pd;
        }
        charged += ch_sum * row.dt_hours / 1000.0;
        discharged += dis_sum * row.dt_hours / 1000.0;
        for &(_, delivered, target) in &row.departed {
            let ratio = delivered / target;
            sat_sum += if ratio < 1.0 { ratio } else { 1.0 };
            sat_n += 1;
        }
    }
    EpisodeMetrics {
        cost_eur,
        satisfaction_pct: if sat_n == 0 {
            100.0
        } else {
            100.0 * sat_sum / sat_n as f64
        },
        vv_per_bus,
        vv_per_step,
        vv_pu,
        energy_charged_mwh: charged,
        energy_discharged_mwh: discharged,
        step_time_sec: 0.0,
        partial,
    }
}

/// Play one greedy episode and score it. Returns the metrics and the full
/// step trace. Tolerance-mode power flow; a diverged step ends the episode
/// with the partial flag set.
pub fn run_episode(
    agent: &Agent,
    grid: &Arc<GridModel>,
    trajectory: &Arc<ExogenousTrajectory>,
    reward: &RewardConfig,
) -> Result<(EpisodeMetrics, EpisodeTrace), EvalError> {
    let cfg = EnvConfig {
        reward: reward.clone(),
        pf: PfMode::default(),
    };
    let mut env = Env::new(Arc::clone(grid), Arc::clone(trajectory), cfg)?;
    let n_bus = env.n_bus();
    let dt = reward.dt_hours;
    let mut rows = Vec::with_capacity(env.horizon());
    let mut elapsed = 0.0;
    while !env.is_done() {
        let action = agent.action(&env)?;
        let frame = &trajectory.frames[env.t()];
        let started = Instant::now();
        let out = env.step(&action)?;
        elapsed += started.elapsed().as_secs_f64();
        let v_mag = if out.diverged {
            vec![f64::NAN; n_bus]
        } else {
            out.voltages.clone()
        };
        rows.push(TraceRow {
            t: out.t,
            dt_hours: dt,
            reward: out.reward,
            cost_eur: out.cost_eur,
            price_ch: frame.price_ch,
            price_dis: frame.price_dis,
            diverged: out.diverged,
            v_mag,
            p_ch_kw: out.chargers.iter().map(|c| c.p_ch_kw).collect(),
            p_dis_kw: out.chargers.iter().map(|c| c.p_dis_kw).collect(),
            soc: out.chargers.iter().map(|c| c.soc_new).collect(),
            departed: out
                .departed
                .iter()
                .map(|d| (d.session.charger_id, d.e_depart, d.session.e_target))
                .collect(),
        });
    }
    let mut metrics = metrics_from_rows(&rows, reward.v_band);
    metrics.step_time_sec = if rows.is_empty() {
        0.0
    } else {
        elapsed / rows.len() as f64
    };
    Ok((
        metrics,
        EpisodeTrace {
            agent: agent.label().to_string(),
            scenario_seed: trajectory.seed,
            n_bus,
            n_chargers: env.n_chargers(),
            rows,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population spread of every metric for every agent, in input
/// order. `config_hash` is caller-supplied provenance, empty by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub schema: String,
    pub config_hash: String,
    pub n_scenarios: usize,
    pub rows: Vec<SummaryRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    // Identical samples have exactly zero spread; the naive formula would
    // report rounding dust because sum(v)/n is not always v.
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Score every agent on every scenario and aggregate. Episodes fan out over
/// `workers` threads with a striped job order and a sequential, ordered
/// reduce, so the output never depends on scheduling.
pub fn evaluate_suite(
    agents: &[Agent],
    grid: &Arc<GridModel>,
    scenarios: &[Arc<ExogenousTrajectory>],
    reward: &RewardConfig,
    workers: usize,
) -> Result<(SummaryTable, Vec<EpisodeTrace>), EvalError> {
    if scenarios.is_empty() {
        return Err(EvalError::InvalidArg("at least one scenario".into()));
    }
    if agents.is_empty() {
        return Err(EvalError::InvalidArg("at least one agent".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..agents.len())
        .flat_map(|a| (0..scenarios.len()).map(move |s| (a, s)))
        .collect();
    let workers = workers.max(1).min(jobs.len());
    let mut results: Vec<Option<Result<(EpisodeMetrics, EpisodeTrace), EvalError>>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let jobs = &jobs;
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                let mut j = w;
                while j < jobs.len() {
                    let (a, s) = jobs[j];
                    local.push((j, run_episode(&agents[a], grid, &scenarios[s], reward)));
                    j += workers;
                }
                local
            }));
        }
        for h in handles {
            for (j, r) in h.join().expect("evaluation worker panicked") {
                results[j] = Some(r);
            }
        }
    });
    let mut per_job = Vec::with_capacity(jobs.len());
    for r in results {
        per_job.push(r.expect("every job filled")?);
    }

    let mut rows = Vec::with_capacity(agents.len() * METRIC_NAMES.len());
    let mut traces = Vec::with_capacity(jobs.len());
    for (a, agent) in agents.iter().enumerate() {
        let span = &per_job[a * scenarios.len()..(a + 1) * scenarios.len()];
        for (name_idx, name) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = span
                .iter()
                .map(|(m, _)| m.named_values()[name_idx].1)
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                algorithm: agent.label().to_string(),
                metric: name.to_string(),
                mean,
                std,
            });
        }
        traces.extend(span.iter().map(|(_, t)| t.clone()));
    }
    Ok((
        SummaryTable {
            schema: SUMMARY_SCHEMA.to_string(),
            config_hash: String::new(),
            n_scenarios: scenarios.len(),
            rows,
        },
        traces,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Per-step action vectors of the best plan, empty at horizon 0.
    pub actions: Vec<Vec<f64>>,
    /// Undiscounted cumulative reward of the best plan.
    pub objective: f64,
    pub plans_evaluated: u64,
}

/// Cumulative reward of a fixed action plan (first `plan.len()` steps).
pub fn play_plan(
    grid: &Arc<GridModel>,
    trajectory: &Arc<ExogenousTrajectory>,
    reward: &RewardConfig,
    plan: &[Vec<f64>],
) -> Result<f64, EvalError> {
    let cfg = EnvConfig {
        reward: reward.clone(),
        pf: PfMode::default(),
    };
    let mut env = Env::new(Arc::clone(grid), Arc::clone(trajectory), cfg)?;
    let mut total = 0.0;
    for step in plan {
        if env.is_done() {
            break;
        }
        total += env.step(step)?.reward;
    }
    Ok(total)
}

/// Exhaustive search over `levels^(chargers * horizon)` discretized plans,
/// the exact optimum of the cumulative reward on the discrete action grid.
/// Plans are enumerated lexicographically (step 0 most significant, levels
/// in the given order); among equal objectives the first plan wins, so the
/// result is deterministic.
pub fn brute_force_plan(
    grid: &Arc<GridModel>,
    trajectory: &Arc<ExogenousTrajectory>,
    reward: &RewardConfig,
    levels: &[f64],
    horizon: usize,
) -> Result<BruteForceResult, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::InvalidArg("need at least one action level".into()));
    }
    if horizon > trajectory.horizon() {
        return Err(EvalError::InvalidArg(format!(
            "plan horizon {horizon} exceeds the trajectory horizon {}",
            trajectory.horizon()
        )));
    }
    if horizon == 0 {
        return Ok(BruteForceResult {
            actions: Vec::new(),
            objective: 0.0,
            plans_evaluated: 0,
        });
    }
    let n_chargers = trajectory.charger_bus.len();
    let digits = n_chargers * horizon;
    let plans = (levels.len() as f64).powi(digits as i32);
    if plans > MAX_PLANS {
        return Err(EvalError::SearchTooLarge {
            plans,
            max: MAX_PLANS,
        });
    }

    let mut idx = vec![0usize; digits];
    let mut best_obj = f64::NEG_INFINITY;
    let mut best: Vec<Vec<f64>> = Vec::new();
    let mut evaluated = 0u64;
    loop {
        let plan: Vec<Vec<f64>> = (0..horizon)
            .map(|t| {
                (0..n_chargers)
                    .map(|c| levels[idx[t * n_chargers + c]])
                    .collect()
            })
            .collect();
        let obj = play_plan(grid, trajectory, reward, &plan)?;
        evaluated += 1;
        if obj > best_obj {
            best_obj = obj;
            best = plan;
        }
        // Lexicographic odometer, least significant digit last.
        let mut pos = digits;
        loop {
            if pos == 0 {
                return Ok(BruteForceResult {
                    actions: best,
                    objective: best_obj,
                    plans_evaluated: evaluated,
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < levels.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest lossless representation; std's parser is correctly rounded,
    // so format -> parse round-trips bit-exactly.
    format!("{v:?}")
}

pub fn trace_csv_header(n_bus: usize, n_chargers: usize) -> String {
    let mut cols = vec![
        "t".to_string(),
        "dt_hours".to_string(),
        "reward".to_string(),
        "cost_eur".to_string(),
        "price_ch".to_string(),
        "price_dis".to_string(),
        "diverged".to_string(),
    ];
    cols.extend((0..n_bus).map(|b| format!("v_{b}")));
    cols.extend((0..n_chargers).map(|c| format!("p_ch_{c}")));
    cols.extend((0..n_chargers).map(|c| format!("p_dis_{c}")));
    cols.extend((0..n_chargers).map(|c| format!("soc_{c}")));
    cols.push("departures".to_string());
    cols.join(",")
}

/// Render a trace as CSV. Departure events are packed into the last column
/// as `charger:delivered_kwh:target_kwh` entries joined by ';'.
pub fn export_trace_csv(trace: &EpisodeTrace) -> String {
    let mut out = trace_csv_header(trace.n_bus, trace.n_chargers);
    out.push('\n');
    for row in &trace.rows {
        let mut cells = vec![
            row.t.to_string(),
            fmt_f64(row.dt_hours),
            fmt_f64(row.reward),
            fmt_f64(row.cost_eur),
            fmt_f64(row.price_ch),
            fmt_f64(row.price_dis),
            row.diverged.to_string(),
        ];
        cells.extend(row.v_mag.iter().map(|&v| fmt_f64(v)));
        cells.extend(row.p_ch_kw.iter().map(|&v| fmt_f64(v)));
        cells.extend(row.p_dis_kw.iter().map(|&v| fmt_f64(v)));
        cells.extend(row.soc.iter().map(|&v| fmt_f64(v)));
        cells.push(
            row.departed
                .iter()
                .map(|(c, e, tgt)| format!("{c}:{}:{}", fmt_f64(*e), fmt_f64(*tgt)))
                .collect::<Vec<_>>()
                .join(";"),
        );
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn parse_field<T: std::str::FromStr>(cell: &str, line: usize, what: &str) -> Result<T, EvalError> {
    cell.parse().map_err(|_| EvalError::Trace {
        line,
        msg: format!("cannot parse {what} from {cell:?}"),
    })
}

/// Parse an exported trace back into rows. Together with
/// [`recount_metrics`] this is the independent verification path for every
/// reported metric.
pub fn parse_trace_csv(csv: &str) -> Result<Vec<TraceRow>, EvalError> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or(EvalError::Trace {
        line: 1,
        msg: "empty trace".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_bus = cols.iter().filter(|c| c.starts_with("v_")).count();
    let n_chargers = cols.iter().filter(|c| c.starts_with("p_ch_")).count();
    let expect = trace_csv_header(n_bus, n_chargers);
    if header != expect {
        return Err(EvalError::Trace {
            line: 1,
            msg: format!("unrecognized header {header:?}"),
        });
    }
    let width = 7 + n_bus + 3 * n_chargers + 1;
    let mut rows = Vec::new();
    for (i, text) in lines.enumerate() {
        let line = i + 2;
        let cells: Vec<&str> = text.split(',').collect();
        if cells.len() != width {
            return Err(EvalError::Trace {
                line,
                msg: format!("expected {width} cells, found {}", cells.len()),
            });
        }
        let mut at = 7 + n_bus;
        let v_mag = cells[7..at]
            .iter()
            .map(|c| parse_field(c, line, "voltage"))
            .collect::<Result<_, _>>()?;
        let p_ch_kw: Vec<f64> = cells[at..at + n_chargers]
            .iter()
            .map(|c| parse_field(c, line, "charge power"))
            .collect::<Result<_, _>>()?;
        at += n_chargers;
        let p_dis_kw: Vec<f64> = cells[at..at + n_chargers]
            .iter()
            .map(|c| parse_field(c, line, "discharge power"))
            .collect::<Result<_, _>>()?;
        at += n_chargers;
        let soc: Vec<f64> = cells[at..at + n_chargers]
            .iter()
            .map(|c| parse_field(c, line, "soc"))
            .collect::<Result<_, _>>()?;
        at += n_chargers;
        let mut departed = Vec::new();
        if !cells[at].is_empty() {
            for item in cells[at].split(';') {
                let parts: Vec<&str> = item.split(':').collect();
                if parts.len() != 3 {
                    return Err(EvalError::Trace {
                        line,
                        msg: format!("malformed departure entry {item:?}"),
                    });
                }
                departed.push((
                    parse_field(parts[0], line, "departure charger")?,
                    parse_field(parts[1], line, "delivered energy")?,
                    parse_field(parts[2], line, "target energy")?,
                ));
            }
        }
        rows.push(TraceRow {
            t: parse_field(cells[0], line, "step index")?,
            dt_hours: parse_field(cells[1], line, "dt")?,
            reward: parse_field(cells[2], line, "reward")?,
            cost_eur: parse_field(cells[3], line, "cost")?,
            price_ch: parse_field(cells[4], line, "charge price")?,
            price_dis: parse_field(cells[5], line, "discharge price")?,
            diverged: parse_field(cells[6], line, "diverged flag")?,
            v_mag,
            p_ch_kw,
            p_dis_kw,
            soc,
            departed,
        });
    }
    Ok(rows)
}

/// Recompute the full metric suite from an exported trace. `step_time_sec`
/// is not recoverable from the trace and comes back as 0.
pub fn recount_metrics(csv: &str, band: f64) -> Result<EpisodeMetrics, EvalError> {
    Ok(metrics_from_rows(&parse_trace_csv(csv)?, band))
}

pub fn export_summary_csv(table: &SummaryTable) -> String {
    let mut out = String::from("algorithm,metric,mean,std\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.algorithm,
            row.metric,
            fmt_f64(row.mean),
            fmt_f64(row.std)
        ));
    }
    out
}

pub fn export_summary_json(table: &SummaryTable) -> Result<String, EvalError> {
    let mut text = serde_json::to_string_pretty(table)?;
    text.push('\n');
    Ok(text)
}

pub fn export_curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,env_steps,grad_steps,train_reward,eval_mean,eval_std\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.epoch,
            p.env_steps,
            p.grad_steps,
            fmt_f64(p.train_reward),
            fmt_f64(p.eval_mean),
            fmt_f64(p.eval_std)
        ));
    }
    out
}

fn safe_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Split a summary into (deterministic metrics, wall-clock metrics). Every
/// field other than `step_time_sec` is a pure function of config and seeds,
/// so keeping the timing rows in their own table lets callers byte-compare
/// the rest across runs.
pub fn split_timing(table: &SummaryTable) -> (SummaryTable, SummaryTable) {
    let (timing_rows, main_rows): (Vec<SummaryRow>, Vec<SummaryRow>) = table
        .rows
        .iter()
        .cloned()
        .partition(|r| r.metric == "step_time_sec");
    let with = |rows| SummaryTable {
        schema: table.schema.clone(),
        config_hash: table.config_hash.clone(),
        n_scenarios: table.n_scenarios,
        rows,
    };
    (with(main_rows), with(timing_rows))
}

/// Write summary CSV + JSON (timing rows segregated into `timing.csv`), one
/// trace CSV per episode, and one curve CSV per seed into `out_dir` (created
/// if missing). Returns the written paths in a deterministic order.
pub fn write_report(
    out_dir: &Path,
    table: &SummaryTable,
    traces: &[EpisodeTrace],
    curves: &[(u64, Vec<CurvePoint>)],
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let (main_table, timing_table) = split_timing(table);
    let summary_csv = out_dir.join("summary.csv");
    std::fs::write(&summary_csv, export_summary_csv(&main_table))?;
    written.push(summary_csv);
    let summary_json = out_dir.join("summary.json");
    std::fs::write(&summary_json, export_summary_json(&main_table)?)?;
    written.push(summary_json);
    let timing_csv = out_dir.join("timing.csv");
    std::fs::write(&timing_csv, export_summary_csv(&timing_table))?;
    written.push(timing_csv);
    for trace in traces {
        let path = out_dir.join(format!(
            "episode_{}_{}.csv",
            safe_name(&trace.agent),
            trace.scenario_seed
        ));
        std::fs::write(&path, export_trace_csv(trace))?;
        written.push(path);
    }
    for (seed, points) in curves {
        let path = out_dir.join(format!("curves_{seed}.csv"));
        std::fs::write(&path, export_curves_csv(points))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::EVSession;
    use crate::powerflow::two_bus_fixture;
    use crate::scenario::ExogenousFrame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trajectory_pq(
        seed: u64,
        p_kw: f64,
        q_kvar: f64,
        horizon: usize,
        sessions: Vec<EVSession>,
    ) -> Arc<ExogenousTrajectory> {
        Arc::new(ExogenousTrajectory {
            grid_id: "two-bus".into(),
            seed,
            dt_hours: 0.25,
            n_bus: 1,
            charger_bus: vec![0],
            frames: (0..horizon)
                .map(|t| ExogenousFrame {
                    t,
                    hour: (t as f64 * 0.25) % 24.0,
                    p_load_kw: vec![p_kw],
                    q_load_kvar: vec![q_kvar],
                    p_pv_kw: vec![0.0],
                    price_ch: 0.2,
                    price_dis: 0.05,
                })
                .collect(),
            sessions,
        })
    }

    fn trajectory(
        seed: u64,
        p_kw: f64,
        horizon: usize,
        sessions: Vec<EVSession>,
    ) -> Arc<ExogenousTrajectory> {
        trajectory_pq(seed, p_kw, 0.3 * p_kw, horizon, sessions)
    }

    fn session(t_arrival: usize, t_depart: usize, e_arrival: f64) -> EVSession {
        EVSession {
            charger_id: 0,
            t_arrival,
            t_depart,
            e_arrival,
            e_target: 45.0,
            e_min: 10.0,
            e_max: 50.0,
            p_ch_max: 40.0,
            p_dis_max: 30.0,
            soc_min_v2g: 0.2,
        }
    }

    fn grid() -> Arc<GridModel> {
        Arc::new(two_bus_fixture())
    }

    #[test]
    fn no_charging_agent_has_zero_cost_and_energy() {
        let traj = trajectory(1, 30.0, 8, vec![session(0, 6, 25.0)]);
        let (m, _) = run_episode(&Agent::NoCharging, &grid(), &traj, &RewardConfig::default())
            .unwrap();
        assert_eq!(m.cost_eur, 0.0);
        assert_eq!(m.energy_charged_mwh, 0.0);
        assert_eq!(m.energy_discharged_mwh, 0.0);
        // The EV departs with its arrival energy: 25 of 45 kWh targeted.
        assert!((m.satisfaction_pct - 100.0 * 25.0 / 45.0).abs() < 1e-12);
        assert!(!m.partial);
    }

    #[test]
    fn in_band_episode_has_zero_violation_metrics() {
        let traj = trajectory(2, 30.0, 8, vec![session(0, 6, 25.0)]);
        let (m, trace) =
            run_episode(&Agent::Cafap, &grid(), &traj, &RewardConfig::default()).unwrap();
        assert_eq!((m.vv_per_bus, m.vv_per_step), (0, 0));
        assert_eq!(m.vv_pu, 0.0);
        assert!(m.energy_charged_mwh > 0.0);
        assert!(trace.rows.iter().all(|r| r.v_mag[0] > 0.95));
    }

    #[test]
    fn violations_are_counted_with_inclusive_boundary() {
        // 3.5 + j1.05 p.u. of load pulls the bus below 0.95 every step.
        let traj = trajectory(3, 3_500.0, 4, vec![]);
        let (m, trace) =
            run_episode(&Agent::NoCharging, &grid(), &traj, &RewardConfig::default()).unwrap();
        assert!(trace.rows.iter().all(|r| r.v_mag[0] < 0.95));
        assert_eq!(m.vv_per_bus, 4);
        assert_eq!(m.vv_per_step, 4);
        assert!(m.vv_pu > 0.0);
        assert!(m.vv_per_step <= m.vv_per_bus);
        // Exactly on the boundary is not a violation. Dyadic band and
        // magnitudes make "exactly" meaningful in floating point.
        assert_eq!(violation_excess(0.9375, 0.0625), 0.0);
        assert_eq!(violation_excess(1.0625, 0.0625), 0.0);
        assert!(violation_excess(0.9375 - 1e-9, 0.0625) > 0.0);
        assert!(violation_excess(1.0625 + 1e-9, 0.0625) > 0.0);
    }

    #[test]
    fn recount_from_exported_trace_matches_bit_for_bit() {
        let sessions = vec![session(0, 4, 25.0), session(5, 8, 20.0)];
        let traj = trajectory(4, 3_200.0, 8, sessions);
        let reward = RewardConfig::default();
        for agent in [Agent::Cafap, Agent::NoCharging] {
            let (m, trace) = run_episode(&agent, &grid(), &traj, &reward).unwrap();
            let csv = export_trace_csv(&trace);
            let recounted = recount_metrics(&csv, reward.v_band).unwrap();
            let a = m.named_values();
            let b = recounted.named_values();
            for (x, y) in a.iter().zip(b.iter()).take(7) {
                assert_eq!(
                    x.1.to_bits(),
                    y.1.to_bits(),
                    "metric {} differs: {} vs {}",
                    x.0,
                    x.1,
                    y.1
                );
            }
            assert_eq!(m.partial, recounted.partial);
        }
    }

    #[test]
    fn diverged_episode_is_flagged_partial() {
        // 9 + j9 p.u. is past the feeder's loadability limit.
        let traj = trajectory_pq(5, 9_000.0, 9_000.0, 8, vec![]);
        let (m, trace) =
            run_episode(&Agent::NoCharging, &grid(), &traj, &RewardConfig::default()).unwrap();
        assert!(m.partial);
        assert_eq!(trace.rows.len(), 1);
        assert!(trace.rows[0].diverged);
        assert!(trace.rows[0].v_mag[0].is_nan());
        // NaN voltages never count as violations.
        assert_eq!(m.vv_per_bus, 0);
        let csv = export_trace_csv(&trace);
        let recounted = recount_metrics(&csv, 0.05).unwrap();
        assert!(recounted.partial);
        assert_eq!(recounted.cost_eur.to_bits(), m.cost_eur.to_bits());
    }

    #[test]
    fn suite_single_scenario_std_is_zero_and_order_is_stable() {
        let traj = trajectory(6, 30.0, 8, vec![session(0, 6, 25.0)]);
        let agents = [Agent::Cafap, Agent::NoCharging];
        let (table, traces) =
            evaluate_suite(&agents, &grid(), &[traj], &RewardConfig::default(), 4).unwrap();
        assert_eq!(table.n_scenarios, 1);
        assert_eq!(table.rows.len(), 2 * METRIC_NAMES.len());
        for row in &table.rows {
            assert_eq!(row.std, 0.0);
        }
        let algs: Vec<&str> = table.rows.iter().map(|r| r.algorithm.as_str()).collect();
        assert!(algs[..8].iter().all(|a| *a == "cafap"));
        assert!(algs[8..].iter().all(|a| *a == "no-charging"));
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].agent, "cafap");
    }

    #[test]
    fn suite_duplicated_scenarios_have_zero_spread() {
        let traj = trajectory(7, 30.0, 8, vec![session(0, 6, 25.0)]);
        let scenarios = vec![Arc::clone(&traj), Arc::clone(&traj), traj];
        let (table, _) = evaluate_suite(
            &[Agent::Cafap],
            &grid(),
            &scenarios,
            &RewardConfig::default(),
            2,
        )
        .unwrap();
        for row in &table.rows {
            if row.metric != "step_time_sec" {
                assert_eq!(row.std, 0.0, "{} should not vary", row.metric);
            }
        }
    }

    #[test]
    fn suite_parallelism_does_not_change_results() {
        let scenarios: Vec<_> = (0..4)
            .map(|i| trajectory(10 + i, 30.0 + 5.0 * i as f64, 8, vec![session(0, 6, 25.0)]))
            .collect();
        let agents = [Agent::Cafap, Agent::NoCharging];
        let reward = RewardConfig::default();
        let (t1, _) = evaluate_suite(&agents, &grid(), &scenarios, &reward, 1).unwrap();
        let (t4, _) = evaluate_suite(&agents, &grid(), &scenarios, &reward, 4).unwrap();
        for (a, b) in t1.rows.iter().zip(&t4.rows) {
            assert_eq!(a.algorithm, b.algorithm);
            assert_eq!(a.metric, b.metric);
            if a.metric != "step_time_sec" {
                assert_eq!(a.mean.to_bits(), b.mean.to_bits());
                assert_eq!(a.std.to_bits(), b.std.to_bits());
            }
        }
    }

    #[test]
    fn cafap_is_worst_on_violation_magnitude() {
        // Base load keeps the bus just inside the band; full-rate charging
        // of a large fleet battery pushes it out. A fat charger stands in
        // for many small ones.
        let sessions = vec![EVSession {
            charger_id: 0,
            t_arrival: 0,
            t_depart: 8,
            e_arrival: 400.0,
            e_target: 1_800.0,
            e_min: 100.0,
            e_max: 2_000.0,
            p_ch_max: 2_000.0,
            p_dis_max: 1_000.0,
            soc_min_v2g: 0.1,
        }];
        let traj = trajectory(8, 3_000.0, 8, sessions);
        let reward = RewardConfig::default();
        let (cafap, _) = run_episode(&Agent::Cafap, &grid(), &traj, &reward).unwrap();
        let (none, _) = run_episode(&Agent::NoCharging, &grid(), &traj, &reward).unwrap();
        assert!(
            cafap.vv_pu > none.vv_pu,
            "cafap {} vs no-charging {}",
            cafap.vv_pu,
            none.vv_pu
        );
        assert!(cafap.vv_per_step >= none.vv_per_step);
        assert_eq!(cafap.satisfaction_pct, 100.0);
    }

    #[test]
    fn brute_force_charges_exactly_to_target() {
        // 25 kWh on arrival, 45 kWh target, 10 kWh per full-power step:
        // two immediate charge steps then rest. Charging later costs
        // shortfall penalty, more charging costs money, discharging sells
        // cheap and buys back dear.
        let traj = trajectory(9, 30.0, 4, vec![session(0, 4, 25.0)]);
        let reward = RewardConfig::default();
        let res = brute_force_plan(&grid(), &traj, &reward, &[-1.0, 0.0, 1.0], 4).unwrap();
        assert_eq!(res.plans_evaluated, 81);
        assert_eq!(
            res.actions,
            vec![vec![1.0], vec![1.0], vec![0.0], vec![0.0]]
        );
        let idle = play_plan(&grid(), &traj, &reward, &vec![vec![0.0]; 4]).unwrap();
        assert!(res.objective > idle);
        // Replaying the winning plan reproduces its objective exactly and
        // the EV leaves with the 45 kWh it asked for.
        let replayed = play_plan(&grid(), &traj, &reward, &res.actions).unwrap();
        assert_eq!(replayed.to_bits(), res.objective.to_bits());
        let cfg = EnvConfig {
            reward: reward.clone(),
            pf: PfMode::default(),
        };
        let mut env = Env::new(grid(), Arc::clone(&traj), cfg).unwrap();
        let mut delivered = None;
        for step in &res.actions {
            let out = env.step(step).unwrap();
            if let Some(d) = out.departed.last() {
                delivered = Some(d.e_depart);
            }
        }
        assert!((delivered.unwrap() - 45.0).abs() < 1e-9);
    }

    #[test]
    fn brute_force_dominates_heuristics_and_random_plans() {
        let traj = trajectory(11, 30.0, 4, vec![session(0, 4, 25.0)]);
        let reward = RewardConfig::default();
        let levels = [-1.0, 0.0, 1.0];
        let best = brute_force_plan(&grid(), &traj, &reward, &levels, 4).unwrap();

        // Greedy full-rate baseline, replayed as a fixed plan.
        let (_, cafap_trace) = run_episode(&Agent::Cafap, &grid(), &traj, &reward).unwrap();
        let cafap_plan: Vec<Vec<f64>> = cafap_trace
            .rows
            .iter()
            .map(|r| vec![if r.p_ch_kw[0] > 0.0 { 1.0 } else { 0.0 }])
            .collect();
        let cafap_obj = play_plan(&grid(), &traj, &reward, &cafap_plan).unwrap();
        assert!(best.objective >= cafap_obj);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let plan: Vec<Vec<f64>> = (0..4)
                .map(|_| vec![levels[rng.gen_range(0..levels.len())]])
                .collect();
            let obj = play_plan(&grid(), &traj, &reward, &plan).unwrap();
            assert!(best.objective >= obj);
        }
    }

    #[test]
    fn brute_force_bounds_and_degenerate_cases() {
        let traj = trajectory(12, 30.0, 16, vec![session(0, 6, 25.0)]);
        let reward = RewardConfig::default();
        let empty = brute_force_plan(&grid(), &traj, &reward, &[0.0, 1.0], 0).unwrap();
        assert!(empty.actions.is_empty());
        assert_eq!(empty.objective, 0.0);

        // 3^16 candidate plans is over the refusal bound.
        let err = brute_force_plan(&grid(), &traj, &reward, &[-1.0, 0.0, 1.0], 16).unwrap_err();
        match err {
            EvalError::SearchTooLarge { plans, max } => {
                assert!(plans > max);
            }
            other => panic!("expected a sizing refusal, got {other}"),
        }

        let err = brute_force_plan(&grid(), &traj, &reward, &[0.0], 17).unwrap_err();
        assert!(matches!(err, EvalError::InvalidArg(_)));
    }

    #[test]
    fn csv_headers_match_documented_schemas() {
        assert_eq!(
            trace_csv_header(2, 1),
            "t,dt_hours,reward,cost_eur,price_ch,price_dis,diverged,v_0,v_1,p_ch_0,p_dis_0,soc_0,departures"
        );
        let table = SummaryTable {
            schema: SUMMARY_SCHEMA.into(),
            config_hash: "abc".into(),
            n_scenarios: 1,
            rows: vec![SummaryRow {
                algorithm: "cafap".into(),
                metric: "cost_eur".into(),
                mean: 1.5,
                std: 0.0,
            }],
        };
        assert_eq!(
            export_summary_csv(&table),
            "algorithm,metric,mean,std\ncafap,cost_eur,1.5,0.0\n"
        );
        let points = [CurvePoint {
            epoch: 1,
            env_steps: 8,
            grad_steps: 4,
            train_reward: -1.25,
            eval_mean: -2.5,
            eval_std: 0.5,
        }];
        assert_eq!(
            export_curves_csv(&points),
            "epoch,env_steps,grad_steps,train_reward,eval_mean,eval_std\n1,8,4,-1.25,-2.5,0.5\n"
        );
    }

    #[test]
    fn summary_json_round_trips_and_reexport_is_byte_identical() {
        let traj = trajectory(13, 30.0, 8, vec![session(0, 6, 25.0)]);
        let (mut table, traces) = evaluate_suite(
            &[Agent::Cafap],
            &grid(),
            &[traj],
            &RewardConfig::default(),
            1,
        )
        .unwrap();
        table.config_hash = "deadbeef".into();
        let json = export_summary_json(&table).unwrap();
        let back: SummaryTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);

        let csv1 = export_summary_csv(&table);
        let csv2 = export_summary_csv(&table);
        assert_eq!(csv1, csv2);
        let t1 = export_trace_csv(&traces[0]);
        let t2 = export_trace_csv(&traces[0]);
        assert_eq!(t1, t2);
    }

    #[test]
    fn write_report_produces_the_expected_files() {
        let traj = trajectory(14, 30.0, 8, vec![session(0, 6, 25.0)]);
        let (table, traces) = evaluate_suite(
            &[Agent::Cafap, Agent::NoCharging],
            &grid(),
            &[traj],
            &RewardConfig::default(),
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let curves = vec![(
            3u64,
            vec![CurvePoint {
                epoch: 1,
                env_steps: 8,
                grad_steps: 4,
                train_reward: 0.0,
                eval_mean: 0.0,
                eval_std: 0.0,
            }],
        )];
        let written = write_report(dir.path(), &table, &traces, &curves).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            [
                "summary.csv",
                "summary.json",
                "timing.csv",
                "episode_cafap_14.csv",
                "episode_no-charging_14.csv",
                "curves_3.csv"
            ]
        );
        for p in &written {
            assert!(p.exists());
        }
        // Wall-clock rows live in timing.csv; everything else is
        // deterministic and stays in the summary.
        let summary = std::fs::read_to_string(&written[0]).unwrap();
        let timing = std::fs::read_to_string(&written[2]).unwrap();
        assert!(!summary.contains("step_time_sec"));
        assert_eq!(timing.lines().count(), 1 + 2, "one timing row per agent");
        assert!(timing.lines().skip(1).all(|l| l.contains("step_time_sec")));
        let reparsed = parse_trace_csv(&std::fs::read_to_string(&written[3]).unwrap()).unwrap();
        assert_eq!(reparsed, traces[0].rows);
    }

    #[test]
    fn trace_parser_reports_malformed_input_with_location() {
        let traj = trajectory(15, 30.0, 4, vec![session(0, 4, 25.0)]);
        let (_, trace) =
            run_episode(&Agent::Cafap, &grid(), &traj, &RewardConfig::default()).unwrap();
        let csv = export_trace_csv(&trace);
        let mut broken: Vec<String> = csv.lines().map(String::from).collect();
        broken[2] = broken[2].replace(',', ";");
        let err = parse_trace_csv(&broken.join("\n")).unwrap_err();
        match err {
            EvalError::Trace { line, .. } => assert_eq!(line, 3),
            other => panic!("expected trace error, got {other}"),
        }
    }

    fn random_suite_metrics() -> Vec<EpisodeMetrics> {
        let mut out = Vec::new();
        for seed in 0..3u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let load = 2_500.0 + 1_500.0 * r.gen::<f64>();
            let traj = trajectory(20 + seed, load, 8, vec![session(0, 6, 20.0)]);
            let (m, _) =
                run_episode(&Agent::Cafap, &grid(), &traj, &RewardConfig::default()).unwrap();
            out.push(m);
        }
        out
    }

    #[test]
    fn metric_invariants_hold_across_random_loadings() {
        for m in random_suite_metrics() {
            assert!(m.vv_per_step <= m.vv_per_bus);
            assert!(m.vv_per_step <= 8);
            assert!(m.vv_per_bus <= 8);
            assert!(m.vv_pu >= 0.0);
            assert!((0.0..=100.0).contains(&m.satisfaction_pct));
            assert!(m.energy_charged_mwh >= 0.0 && m.energy_discharged_mwh >= 0.0);
        }
    }
}
