//! Synthetic exogenous trajectories: per-bus loads with a double-peak daily
//! profile, a daylight PV bell, day-ahead-shaped prices, and EV sessions from
//! a time-inhomogeneous arrival process. Generation is a pure function of
//! (config, seed) and never sees agent actions.

pub mod file;
pub mod store;

pub use file::{
    load_trajectory, parse_scenario_str, save_trajectory, scenario_to_string,
    SCENARIO_FORMAT_HEADER,
};
pub use store::{EpisodeRecord, SegmentView, StoredStep, TrajectoryStore, TransitionBatch};

use crate::fleet::EVSession;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported scenario format version: {0:?}")]
    UnsupportedVersion(String),
    #[error("segment length {k} exceeds every stored episode (longest is {longest})")]
    SegmentTooLong { k: usize, longest: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(&'static str),
    #[error(transparent)]
    Fleet(#[from] crate::fleet::FleetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Exogenous quantities for one step. Power columns are kW/kvar in sign
/// convention of the solver: consumption positive, so PV entries are ≤ 0.
/// Vectors are sized to the grid's non-slack bus count.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousFrame {
    pub t: usize,
    /// Fractional hour of day in [0, 24).
    pub hour: f64,
    pub p_load_kw: Vec<f64>,
    pub q_load_kvar: Vec<f64>,
    pub p_pv_kw: Vec<f64>,
    /// Energy purchase price, EUR/kWh.
    pub price_ch: f64,
    /// Feed-in price for discharged energy, EUR/kWh.
    pub price_dis: f64,
}

/// One generated episode worth of exogenous data plus the static
/// charger-to-bus assignment it was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousTrajectory {
    pub grid_id: String,
    pub seed: u64,
    pub dt_hours: f64,
    pub n_bus: usize,
    /// Bus index (into the non-slack bus array) per charger.
    pub charger_bus: Vec<usize>,
    pub frames: Vec<ExogenousFrame>,
    pub sessions: Vec<EVSession>,
}

impl ExogenousTrajectory {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }

    pub fn n_chargers(&self) -> usize {
        self.charger_bus.len()
    }
}

/// Generation knobs. Defaults are the desk-scale setup: 13-bus feeder, 26
/// chargers, one day at 15-minute resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid_id: String,
    /// Non-slack bus count; must match the grid the scenario will run on.
    pub n_bus: usize,
    pub n_chargers: usize,
    pub horizon: usize,
    pub dt_hours: f64,

    /// Mean per-bus base load at profile value 1.0, kW.
    pub load_level_kw: f64,
    /// Uniform scaling of all loads (generalization axis, 0.5 to 1.5).
    pub load_multiplier: f64,
    /// Multiplicative Gaussian noise sigma on loads.
    pub load_noise: f64,
    /// q = q_fraction * p for base loads (roughly power factor 0.95).
    pub q_fraction: f64,

    /// Per-bus PV peak, kW (stored as negative injections).
    pub pv_peak_kw: f64,
    pub pv_noise: f64,

    /// Price curve base, EUR/kWh.
    pub price_base: f64,
    pub price_amplitude: f64,
    pub price_noise: f64,
    /// price_dis = ratio * price_ch; 1.0 means symmetric tariffs.
    pub price_dis_ratio: f64,

    /// Scales the arrival intensity (probability per free charger per step
    /// at the daily peak).
    pub arrival_rate: f64,
    /// Stay duration bounds, steps.
    pub stay_min_steps: usize,
    pub stay_max_steps: usize,
    /// Battery size range, kWh.
    pub e_max_min: f64,
    pub e_max_max: f64,
    /// Arrival SoC range as fractions of e_max.
    pub soc_arrival_min: f64,
    pub soc_arrival_max: f64,
    pub ev_p_ch_max_kw: f64,
    pub ev_p_dis_max_kw: f64,
    pub soc_min_v2g: f64,
    /// Requested departure SoC; per-session targets are clipped so a
    /// full-rate charger can always reach them in the available time.
    pub soc_target: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_id: "builtin:ieee13".into(),
            n_bus: 12,
            n_chargers: 26,
            horizon: 96,
            dt_hours: 0.25,
            load_level_kw: 180.0,
            load_multiplier: 1.0,
            load_noise: 0.08,
            q_fraction: 0.33,
            pv_peak_kw: 60.0,
            pv_noise: 0.15,
            price_base: 0.18,
            price_amplitude: 0.5,
            price_noise: 0.03,
            price_dis_ratio: 1.0,
            arrival_rate: 0.05,
            stay_min_steps: 8,
            stay_max_steps: 40,
            e_max_min: 40.0,
            e_max_max: 80.0,
            soc_arrival_min: 0.25,
            soc_arrival_max: 0.6,
            ev_p_ch_max_kw: 22.0,
            ev_p_dis_max_kw: 11.0,
            soc_min_v2g: 0.2,
            soc_target: 0.9,
        }
    }
}

impl ScenarioConfig {
    /// The benchmark shape: 34-bus feeder, 150 chargers, 300 steps.
    pub fn paper_shape() -> Self {
        Self {
            grid_id: "builtin:ieee34".into(),
            n_bus: 33,
            n_chargers: 150,
            horizon: 300,
            dt_hours: 0.25,
            load_level_kw: 18.0,
            pv_peak_kw: 6.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: &str| Err(ScenarioError::InvalidConfig(msg.into()));
        if self.n_bus == 0 || self.n_chargers == 0 || self.horizon == 0 {
            return fail("n_bus, n_chargers, and horizon must be positive");
        }
        if !(self.dt_hours > 0.0) {
            return fail("dt_hours must be positive");
        }
        for (name, v) in [
            ("load_level_kw", self.load_level_kw),
            ("load_multiplier", self.load_multiplier),
            ("load_noise", self.load_noise),
            ("q_fraction", self.q_fraction),
            ("pv_peak_kw", self.pv_peak_kw),
            ("pv_noise", self.pv_noise),
            ("price_base", self.price_base),
            ("price_amplitude", self.price_amplitude),
            ("price_noise", self.price_noise),
            ("price_dis_ratio", self.price_dis_ratio),
            ("arrival_rate", self.arrival_rate),
            ("ev_p_ch_max_kw", self.ev_p_ch_max_kw),
            ("ev_p_dis_max_kw", self.ev_p_dis_max_kw),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(&format!("{name} must be finite and nonnegative"));
            }
        }
        if self.stay_min_steps == 0 || self.stay_min_steps > self.stay_max_steps {
            return fail("need 1 <= stay_min_steps <= stay_max_steps");
        }
        if !(0.0 < self.e_max_min && self.e_max_min <= self.e_max_max) {
            return fail("need 0 < e_max_min <= e_max_max");
        }
        if !(0.0..=1.0).contains(&self.soc_min_v2g)
            || !(0.0 < self.soc_target && self.soc_target <= 1.0)
        {
            return fail("soc_min_v2g in [0,1] and soc_target in (0,1] required");
        }
        if !(self.soc_min_v2g <= self.soc_arrival_min
            && self.soc_arrival_min < self.soc_arrival_max
            && self.soc_arrival_max <= 1.0)
        {
            return fail("need soc_min_v2g <= soc_arrival_min < soc_arrival_max <= 1");
        }
        Ok(())
    }

    /// Round-robin charger placement over non-slack buses.
    pub fn charger_bus_assignment(&self) -> Vec<usize> {
        (0..self.n_chargers).map(|i| i % self.n_bus).collect()
    }
}

/// Double-peak daily demand profile in [0.5, 1.0]: morning shoulder around
/// 08:30, evening peak around 19:00.
fn load_shape(hour: f64) -> f64 {
    let morning = (-((hour - 8.5) * (hour - 8.5)) / (2.0 * 2.0 * 2.0)).exp();
    let evening = (-((hour - 19.0) * (hour - 19.0)) / (2.0 * 2.5 * 2.5)).exp();
    0.5 + 0.2 * morning + 0.5 * evening
}

/// Daylight bell in [0, 1], nonzero between roughly 06:00 and 19:30.
fn pv_shape(hour: f64) -> f64 {
    if hour <= 6.0 || hour >= 19.5 {
        return 0.0;
    }
    let s = (std::f64::consts::PI * (hour - 6.0) / 13.5).sin();
    s.max(0.0).powf(1.3)
}

/// Day-ahead-shaped relative price curve: morning and evening humps, cheap
/// small hours.
fn price_shape(hour: f64) -> f64 {
    let morning = (-((hour - 9.0) * (hour - 9.0)) / 8.0).exp();
    let evening = (-((hour - 19.5) * (hour - 19.5)) / 6.0).exp();
    let night = (-((hour - 3.5) * (hour - 3.5)) / 10.0).exp();
    0.45 * morning + 0.8 * evening - 0.25 * night
}

/// Arrival intensity profile in [0.2, 1.0]: commuter morning and evening.
fn arrival_shape(hour: f64) -> f64 {
    let morning = (-((hour - 8.5) * (hour - 8.5)) / (2.0 * 2.0 * 2.0)).exp();
    let evening = (-((hour - 18.5) * (hour - 18.5)) / (2.0 * 2.5 * 2.5)).exp();
    0.2 + 0.8 * (morning + evening).min(1.0)
}

/// Generate one exogenous trajectory. Deterministic in (cfg, seed); consumes
/// no policy input, so trajectory content is action-independent by
/// construction.
pub fn generate_scenario(
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<ExogenousTrajectory, ScenarioError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut frames = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let hour = (t as f64 * cfg.dt_hours) % 24.0;
        let mut p_load = Vec::with_capacity(cfg.n_bus);
        let mut q_load = Vec::with_capacity(cfg.n_bus);
        let mut p_pv = Vec::with_capacity(cfg.n_bus);
        for _ in 0..cfg.n_bus {
            let noise = (1.0 + cfg.load_noise * normal(&mut rng)).max(0.05);
            let p = cfg.load_level_kw * cfg.load_multiplier * load_shape(hour) * noise;
            p_load.push(p);
            q_load.push(cfg.q_fraction * p);
            let cloud = (1.0 - cfg.pv_noise * normal(&mut rng).abs()).clamp(0.0, 1.0);
            p_pv.push(-(cfg.pv_peak_kw * pv_shape(hour) * cloud));
        }
        let price_ch = (cfg.price_base * (1.0 + cfg.price_amplitude * price_shape(hour))
            + cfg.price_base * cfg.price_noise * normal(&mut rng))
        .max(0.01);
        let price_dis = cfg.price_dis_ratio * price_ch;
        frames.push(ExogenousFrame {
            t,
            hour,
            p_load_kw: p_load,
            q_load_kvar: q_load,
            p_pv_kw: p_pv,
            price_ch,
            price_dis,
        });
    }

    // Sessions are drawn per charger by walking the day, so overlap on one
    // charger is impossible by construction; validation still re-checks.
    let mut sessions = Vec::new();
    for charger_id in 0..cfg.n_chargers {
        let mut t = 0usize;
        while t < cfg.horizon {
            let hour = (t as f64 * cfg.dt_hours) % 24.0;
            if rng.gen::<f64>() < cfg.arrival_rate * arrival_shape(hour) {
                let stay = rng.gen_range(cfg.stay_min_steps..=cfg.stay_max_steps);
                let t_depart = (t + stay).min(cfg.horizon);
                let e_max = rng.gen_range(cfg.e_max_min..=cfg.e_max_max);
                let soc_arrival = rng.gen_range(cfg.soc_arrival_min..cfg.soc_arrival_max);
                let e_arrival = soc_arrival * e_max;
                let reachable = e_arrival
                    + cfg.ev_p_ch_max_kw * (t_depart - t) as f64 * cfg.dt_hours;
                let e_target = (cfg.soc_target * e_max).min(reachable).min(e_max);
                let session = EVSession {
                    charger_id,
                    t_arrival: t,
                    t_depart,
                    e_arrival,
                    e_target: e_target.max(cfg.soc_min_v2g * e_max),
                    e_min: cfg.soc_min_v2g * e_max,
                    e_max,
                    p_ch_max: cfg.ev_p_ch_max_kw,
                    p_dis_max: cfg.ev_p_dis_max_kw,
                    soc_min_v2g: cfg.soc_min_v2g,
                };
                session.validate()?;
                sessions.push(session);
                t = t_depart;
            } else {
                t += 1;
            }
        }
    }
    sessions.sort_by_key(|s| (s.t_arrival, s.charger_id));

    Ok(ExogenousTrajectory {
        grid_id: cfg.grid_id.clone(),
        seed,
        dt_hours: cfg.dt_hours,
        n_bus: cfg.n_bus,
        charger_bus: cfg.charger_bus_assignment(),
        frames,
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_in_cfg_and_seed() {
        let cfg = ScenarioConfig::default();
        let a = generate_scenario(&cfg, 7).unwrap();
        let b = generate_scenario(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_load_multiplier_zeroes_loads() {
        let cfg = ScenarioConfig {
            load_multiplier: 0.0,
            ..ScenarioConfig::default()
        };
        let traj = generate_scenario(&cfg, 1).unwrap();
        for f in &traj.frames {
            assert!(f.p_load_kw.iter().all(|&p| p == 0.0));
            assert!(f.q_load_kvar.iter().all(|&q| q == 0.0));
        }
    }

    #[test]
    fn multiplier_scales_loads_linearly() {
        let base = generate_scenario(&ScenarioConfig::default(), 3).unwrap();
        let cfg = ScenarioConfig {
            load_multiplier: 1.5,
            ..ScenarioConfig::default()
        };
        let scaled = generate_scenario(&cfg, 3).unwrap();
        for (a, b) in base.frames.iter().zip(scaled.frames.iter()) {
            for (pa, pb) in a.p_load_kw.iter().zip(b.p_load_kw.iter()) {
                assert!((pb - 1.5 * pa).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frames_respect_shapes_and_signs() {
        let traj = generate_scenario(&ScenarioConfig::default(), 5).unwrap();
        assert_eq!(traj.frames.len(), 96);
        for f in &traj.frames {
            assert_eq!(f.p_load_kw.len(), 12);
            assert!(f.price_ch > 0.0 && f.price_dis > 0.0);
            assert!(f.p_pv_kw.iter().all(|&p| p <= 0.0));
            assert!(f.p_load_kw.iter().all(|&p| p >= 0.0));
            if f.hour < 5.9 || f.hour > 19.6 {
                assert!(f.p_pv_kw.iter().all(|&p| p == 0.0), "PV at night");
            }
        }
    }

    #[test]
    fn sessions_are_feasible_and_non_overlapping() {
        let cfg = ScenarioConfig {
            arrival_rate: 0.25, // stress occupancy
            ..ScenarioConfig::default()
        };
        let traj = generate_scenario(&cfg, 11).unwrap();
        assert!(!traj.sessions.is_empty());
        for s in &traj.sessions {
            s.validate().unwrap();
            assert!(s.t_depart <= cfg.horizon);
            let reachable =
                s.e_arrival + s.p_ch_max * (s.t_depart - s.t_arrival) as f64 * cfg.dt_hours;
            assert!(s.e_target <= reachable + 1e-9, "target beyond full-rate reach");
        }
        for c in 0..cfg.n_chargers {
            let mut windows: Vec<(usize, usize)> = traj
                .sessions
                .iter()
                .filter(|s| s.charger_id == c)
                .map(|s| (s.t_arrival, s.t_depart))
                .collect();
            windows.sort();
            for w in windows.windows(2) {
                assert!(w[0].1 <= w[1].0, "overlap on charger {c}: {w:?}");
            }
        }
    }

    #[test]
    fn arrivals_follow_the_daily_intensity() {
        // Pool many seeds; morning+evening arrivals must dominate small hours.
        let cfg = ScenarioConfig::default();
        let mut by_hour = [0usize; 24];
        for seed in 0..40 {
            let traj = generate_scenario(&cfg, seed).unwrap();
            for s in &traj.sessions {
                let h = (s.t_arrival as f64 * cfg.dt_hours) % 24.0;
                by_hour[h as usize] += 1;
            }
        }
        let commute: usize = (7..=9).chain(17..=19).map(|h| by_hour[h]).sum();
        let small_hours: usize = (1..=3).map(|h| by_hour[h]).sum();
        assert!(commute > 3 * small_hours, "{by_hour:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.horizon = 0;
        assert!(generate_scenario(&cfg, 1).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.stay_min_steps = 0;
        assert!(generate_scenario(&cfg, 1).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.soc_arrival_min = 0.1; // below the V2G floor
        assert!(generate_scenario(&cfg, 1).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.load_level_kw = -5.0;
        assert!(generate_scenario(&cfg, 1).is_err());
    }

    #[test]
    fn paper_shape_dimensions() {
        let cfg = ScenarioConfig::paper_shape();
        let traj = generate_scenario(&cfg, 2).unwrap();
        assert_eq!(traj.horizon(), 300);
        assert_eq!(traj.n_chargers(), 150);
        assert_eq!(traj.n_bus, 33);
        assert_eq!(traj.charger_bus[149], 149 % 33);
    }
}
