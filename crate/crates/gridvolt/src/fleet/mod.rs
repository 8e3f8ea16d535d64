//! EV sessions, charger states, and the piecewise state-of-charge transition.
//!
//! The transition is implemented twice over the same arithmetic: a plain
//! fast path ([`apply_action`]) and a tape path ([`apply_action_diff`]) whose
//! values agree bit-for-bit. Realized power is back-computed from the clamped
//! SoC delta so energy bookkeeping stays exact under saturation.

use crate::diffmath::{DNode, DiffError, Tape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("invalid session for charger {charger_id}: {msg}")]
    InvalidSession { charger_id: usize, msg: String },
    #[error("charger {charger_id} already occupied when a session arrives at step {t}")]
    OverlappingSessions { charger_id: usize, t: usize },
    #[error("session references charger {0} but the fleet has {1} chargers")]
    UnknownCharger(usize, usize),
}

/// One EV plug-in session. Energies are kWh, powers kW, SoC quantities are
/// fractions of `e_max`. The occupancy window is `[t_arrival, t_depart)` in
/// step indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EVSession {
    pub charger_id: usize,
    pub t_arrival: usize,
    pub t_depart: usize,
    pub e_arrival: f64,
    pub e_target: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub p_ch_max: f64,
    pub p_dis_max: f64,
    pub soc_min_v2g: f64,
}

impl EVSession {
    pub fn validate(&self) -> Result<(), FleetError> {
        let fail = |msg: String| {
            Err(FleetError::InvalidSession {
                charger_id: self.charger_id,
                msg,
            })
        };
        for (name, v) in [
            ("e_arrival", self.e_arrival),
            ("e_target", self.e_target),
            ("e_min", self.e_min),
            ("e_max", self.e_max),
            ("p_ch_max", self.p_ch_max),
            ("p_dis_max", self.p_dis_max),
            ("soc_min_v2g", self.soc_min_v2g),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} is not finite"));
            }
        }
        if self.t_arrival >= self.t_depart {
            return fail(format!(
                "t_arrival {} must precede t_depart {}",
                self.t_arrival, self.t_depart
            ));
        }
        if self.e_max <= 0.0 {
            return fail(format!("e_max {} must be positive", self.e_max));
        }
        if !(0.0 <= self.e_min && self.e_min <= self.e_arrival && self.e_arrival <= self.e_max) {
            return fail(format!(
                "need 0 <= e_min <= e_arrival <= e_max, got {} / {} / {}",
                self.e_min, self.e_arrival, self.e_max
            ));
        }
        if !(self.e_min <= self.e_target && self.e_target <= self.e_max) {
            return fail(format!(
                "need e_min <= e_target <= e_max, got {} / {} / {}",
                self.e_min, self.e_target, self.e_max
            ));
        }
        if self.p_ch_max < 0.0 || self.p_dis_max < 0.0 {
            return fail("power limits must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.soc_min_v2g) {
            return fail(format!("soc_min_v2g {} outside [0,1]", self.soc_min_v2g));
        }
        // The arrival state must already be inside the reachable SoC band,
        // otherwise the clamp would instantly manufacture energy.
        if self.e_arrival < self.soc_min_v2g * self.e_max - 1e-12 {
            return fail(format!(
                "e_arrival {} below the V2G floor {} kWh",
                self.e_arrival,
                self.soc_min_v2g * self.e_max
            ));
        }
        Ok(())
    }
}

/// One charging point, pinned to a grid bus. `soc` is meaningful only while
/// a session is plugged in.
#[derive(Debug, Clone)]
pub struct ChargerState {
    pub charger_id: usize,
    pub bus_index: usize,
    pub soc: f64,
    pub session: Option<EVSession>,
    /// Charge/discharge conversion efficiency; 1.0 models a lossless charger.
    pub efficiency: f64,
}

impl ChargerState {
    pub fn new(charger_id: usize, bus_index: usize) -> Self {
        Self {
            charger_id,
            bus_index,
            soc: 0.0,
            session: None,
            efficiency: 1.0,
        }
    }

    pub fn occupied(&self) -> bool {
        self.session.is_some()
    }
}

/// A finished (or truncated) session together with its departure energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepartedSession {
    pub session: EVSession,
    /// Energy in the battery when the EV left, kWh.
    pub e_depart: f64,
    /// Step at which the charger was actually vacated.
    pub t_departed: usize,
}

/// Fraction of the session's energy demand that was met: min(1, e_depart /
/// e_target), with a vacuous demand (e_target = 0) counting as fully met.
pub fn user_satisfaction(rec: &DepartedSession) -> f64 {
    if rec.session.e_target <= 0.0 {
        return 1.0;
    }
    (rec.e_depart / rec.session.e_target).min(1.0)
}

/// Branch taken by the action transition; also hashed into the tape branch
/// signature so gradient checks can flag straddling probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActionBranch {
    Charge,
    Discharge,
}

fn split_action(a: f64, session: &EVSession, efficiency: f64, dt: f64) -> (ActionBranch, f64) {
    // Charging fills the battery at eta * p_ch_max when a = 1; discharging
    // empties it at p_dis_max when a = -1 (conversion loss sits on the grid
    // side of the meter in both directions).
    if a > 0.0 {
        (
            ActionBranch::Charge,
            dt * efficiency * session.p_ch_max / session.e_max,
        )
    } else {
        (
            ActionBranch::Discharge,
            dt * session.p_dis_max / session.e_max,
        )
    }
}

fn clamp3(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Advance one charger by one step under normalized action `a` in [-1, 1].
/// Returns (new SoC, realized charging power kW, realized discharging power
/// kW); exactly one of the powers is nonzero. An unoccupied charger is a
/// no-op with zero powers.
pub fn apply_action(state: &ChargerState, a: f64, dt: f64) -> (f64, f64, f64) {
    debug_assert!(a.is_finite(), "action must be finite");
    debug_assert!(dt > 0.0, "dt must be positive");
    let Some(session) = &state.session else {
        return (state.soc, 0.0, 0.0);
    };
    let a = clamp3(a, -1.0, 1.0);
    let (branch, rate) = split_action(a, session, state.efficiency, dt);
    let x = state.soc + a * rate;
    let soc_new = clamp3(x, session.soc_min_v2g, 1.0);
    let delta = soc_new - state.soc;
    match branch {
        ActionBranch::Charge => {
            let p_ch = delta * (session.e_max / (state.efficiency * dt));
            (soc_new, p_ch, 0.0)
        }
        ActionBranch::Discharge => {
            let p_dis = -(delta * (state.efficiency * session.e_max / dt));
            (soc_new, 0.0, p_dis)
        }
    }
}

/// Tape twin of [`apply_action`] for an occupied charger: same arithmetic in
/// the same order, so values agree bit-for-bit. Gradients are zero wherever
/// the SoC or action clamp saturates.
pub fn apply_action_diff(
    tape: &mut Tape,
    session: &EVSession,
    efficiency: f64,
    soc: DNode,
    a: DNode,
    dt: f64,
) -> Result<(DNode, DNode, DNode), DiffError> {
    debug_assert!(dt > 0.0, "dt must be positive");
    let a = tape.clamp(a, -1.0, 1.0)?;
    let a_val = tape.value(a);
    let (branch, rate) = split_action(a_val, session, efficiency, dt);
    // The sign of the action selects the power limit, so a = 0 is a kink of
    // the composite transition worth recording.
    tape.note_kink(a_val.abs(), 0x41 + branch as u64);
    let scaled = tape.mul_const(a, rate);
    let x = tape.add(soc, scaled);
    let soc_new = tape.clamp(x, session.soc_min_v2g, 1.0)?;
    let neg_soc = tape.neg(soc);
    let delta = tape.add(soc_new, neg_soc);
    let zero = tape.constant(0.0);
    match branch {
        ActionBranch::Charge => {
            let p_ch = tape.mul_const(delta, session.e_max / (efficiency * dt));
            Ok((soc_new, p_ch, zero))
        }
        ActionBranch::Discharge => {
            let scaled = tape.mul_const(delta, efficiency * session.e_max / dt);
            let p_dis = tape.neg(scaled);
            Ok((soc_new, zero, p_dis))
        }
    }
}

/// The charger pool of one environment instance.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub chargers: Vec<ChargerState>,
}

impl Fleet {
    /// Create an unoccupied fleet with the given charger-to-bus assignment.
    pub fn new(bus_assignment: &[usize]) -> Self {
        let chargers = bus_assignment
            .iter()
            .enumerate()
            .map(|(id, &bus)| ChargerState::new(id, bus))
            .collect();
        Self { chargers }
    }

    pub fn len(&self) -> usize {
        self.chargers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chargers.is_empty()
    }

    /// Process step `t`: first vacate sessions whose departure step is `t`,
    /// then plug in sessions whose arrival step is `t` (a charger may turn
    /// over within one step). Returns the vacated sessions.
    pub fn process_arrivals_departures(
        &mut self,
        t: usize,
        sessions: &[EVSession],
    ) -> Result<Vec<DepartedSession>, FleetError> {
        let mut departed = Vec::new();
        for charger in &mut self.chargers {
            if charger.session.as_ref().is_some_and(|s| s.t_depart == t) {
                let session = charger.session.take().unwrap();
                departed.push(DepartedSession {
                    e_depart: charger.soc * session.e_max,
                    t_departed: t,
                    session,
                });
                charger.soc = 0.0;
            }
        }
        for session in sessions.iter().filter(|s| s.t_arrival == t) {
            session.validate()?;
            let n = self.chargers.len();
            let charger = self
                .chargers
                .get_mut(session.charger_id)
                .ok_or(FleetError::UnknownCharger(session.charger_id, n))?;
            if charger.occupied() {
                return Err(FleetError::OverlappingSessions {
                    charger_id: session.charger_id,
                    t,
                });
            }
            charger.soc = session.e_arrival / session.e_max;
            charger.session = Some(session.clone());
        }
        Ok(departed)
    }

    /// Vacate every occupied charger at episode truncation, archiving the
    /// sessions with their current SoC.
    pub fn force_depart_all(&mut self, t: usize) -> Vec<DepartedSession> {
        let mut departed = Vec::new();
        for charger in &mut self.chargers {
            if let Some(session) = charger.session.take() {
                departed.push(DepartedSession {
                    e_depart: charger.soc * session.e_max,
                    t_departed: t,
                    session,
                });
                charger.soc = 0.0;
            }
        }
        departed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn session() -> EVSession {
        EVSession {
            charger_id: 0,
            t_arrival: 4,
            t_depart: 40,
            e_arrival: 20.0,
            e_target: 45.0,
            e_min: 0.0,
            e_max: 50.0,
            p_ch_max: 40.0,
            p_dis_max: 30.0,
            soc_min_v2g: 0.2,
        }
    }

    fn occupied_charger(soc: f64) -> ChargerState {
        let mut c = ChargerState::new(0, 3);
        c.soc = soc;
        c.session = Some(session());
        c
    }

    #[test]
    fn validation_rejects_inconsistent_sessions() {
        let mut s = session();
        s.t_depart = s.t_arrival;
        assert!(s.validate().is_err());

        let mut s = session();
        s.e_arrival = 60.0;
        assert!(s.validate().is_err());

        let mut s = session();
        s.e_target = -1.0;
        assert!(s.validate().is_err());

        let mut s = session();
        s.p_dis_max = -5.0;
        assert!(s.validate().is_err());

        let mut s = session();
        s.e_arrival = 5.0; // below the 0.2 * 50 kWh V2G floor
        assert!(s.validate().is_err());

        assert!(session().validate().is_ok());
    }

    #[test]
    fn idle_action_is_a_fixed_point() {
        let (soc, p_ch, p_dis) = apply_action(&occupied_charger(0.5), 0.0, 0.25);
        assert_eq!((soc, p_ch, p_dis), (0.5, 0.0, 0.0));
    }

    #[test]
    fn unoccupied_charger_is_a_noop() {
        let c = ChargerState::new(0, 1);
        assert_eq!(apply_action(&c, 0.7, 0.25), (0.0, 0.0, 0.0));
    }

    #[test]
    fn full_battery_saturates_and_power_is_backcomputed() {
        // dt * p_ch_max / e_max = 0.25 * 40 / 50 = 0.2 per step at a = 1.
        let (soc, p_ch, p_dis) = apply_action(&occupied_charger(0.9), 1.0, 0.25);
        assert_eq!(soc, 1.0);
        assert_eq!(p_dis, 0.0);
        // Realized charge energy is 0.1 * e_max = 5 kWh, i.e. 20 kW over 15 min.
        assert!((p_ch * 0.25 - 5.0).abs() < 1e-12);
        assert!(p_ch <= 40.0);
    }

    #[test]
    fn v2g_floor_saturates_discharge() {
        // dt * p_dis_max / e_max = 0.25 * 30 / 50 = 0.15 per step at a = -1.
        let (soc, p_ch, p_dis) = apply_action(&occupied_charger(0.3), -1.0, 0.25);
        assert_eq!(soc, 0.2);
        assert_eq!(p_ch, 0.0);
        assert!((p_dis * 0.25 - 5.0).abs() < 1e-12);
        assert!(p_dis <= 30.0);
    }

    #[test]
    fn interior_gradient_is_the_charge_rate() {
        let s = session();
        let mut tape = Tape::new();
        let soc = tape.leaf(0.5);
        let a = tape.leaf(0.4);
        let (soc_new, _, _) = apply_action_diff(&mut tape, &s, 1.0, soc, a, 0.25).unwrap();
        let grads = tape.backward(soc_new).unwrap();
        let expect = 0.25 * s.p_ch_max / s.e_max;
        assert!((grads.wrt(a) - expect).abs() < 1e-15);
        assert!((grads.wrt(soc) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_gradient_is_zero() {
        let s = session();
        let mut tape = Tape::new();
        let soc = tape.leaf(0.95);
        let a = tape.leaf(1.0);
        let (soc_new, _, _) = apply_action_diff(&mut tape, &s, 1.0, soc, a, 0.25).unwrap();
        let grads = tape.backward(soc_new).unwrap();
        assert_eq!(grads.wrt(a), 0.0);
    }

    #[test]
    fn dual_paths_agree_bit_for_bit_on_1000_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut s = session();
            s.e_max = rng.gen_range(20.0..80.0);
            s.p_ch_max = rng.gen_range(5.0..50.0);
            s.p_dis_max = rng.gen_range(0.0..50.0);
            s.soc_min_v2g = rng.gen_range(0.0..0.4);
            let eta = if rng.gen_bool(0.5) {
                1.0
            } else {
                rng.gen_range(0.7..1.0)
            };
            let soc0 = rng.gen_range(s.soc_min_v2g..1.0);
            let a0 = rng.gen_range(-1.3..1.3); // include out-of-range commands
            let dt = 0.25;

            let mut c = ChargerState::new(0, 0);
            c.soc = soc0;
            c.session = Some(s.clone());
            c.efficiency = eta;
            let (soc_p, ch_p, dis_p) = apply_action(&c, a0, dt);

            let mut tape = Tape::new();
            let soc = tape.leaf(soc0);
            let a = tape.leaf(a0);
            let (soc_d, ch_d, dis_d) =
                apply_action_diff(&mut tape, &s, eta, soc, a, dt).unwrap();
            assert_eq!(soc_p.to_bits(), tape.value(soc_d).to_bits());
            assert_eq!(ch_p.to_bits(), tape.value(ch_d).to_bits());
            assert_eq!(dis_p.to_bits(), tape.value(dis_d).to_bits());
        }
    }

    #[test]
    fn exclusivity_bounds_and_soc_band_hold_under_random_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = occupied_charger(0.4);
        for _ in 0..500 {
            let a = rng.gen_range(-1.0..1.0);
            let (soc, p_ch, p_dis) = apply_action(&c, a, 0.25);
            assert_eq!(p_ch * p_dis, 0.0);
            assert!(p_ch >= 0.0 && p_ch <= 40.0 + 1e-12);
            assert!(p_dis >= 0.0 && p_dis <= 30.0 + 1e-12);
            assert!((0.2..=1.0).contains(&soc));
            c.soc = soc;
        }
    }

    #[test]
    fn energy_is_conserved_over_a_session() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut c = occupied_charger(0.4);
        let dt = 0.25;
        let mut net_kwh = 0.0;
        for _ in 0..200 {
            let a = rng.gen_range(-1.0..1.0);
            let (soc, p_ch, p_dis) = apply_action(&c, a, dt);
            net_kwh += (p_ch - p_dis) * dt;
            c.soc = soc;
        }
        let expect = (c.soc - 0.4) * 50.0;
        assert!((net_kwh - expect).abs() < 1e-9, "{net_kwh} vs {expect}");
    }

    #[test]
    fn efficiency_shifts_losses_to_the_grid_side() {
        let mut c = occupied_charger(0.5);
        c.efficiency = 0.9;
        // Charging: battery gains delta * e_max, the meter pays delta / eta.
        let (soc, p_ch, _) = apply_action(&c, 0.5, 0.25);
        let delta = soc - 0.5;
        assert!(delta > 0.0);
        assert!((p_ch * 0.25 - delta * 50.0 / 0.9).abs() < 1e-12);
        // Discharging: battery loses delta * e_max, the meter sees eta * that.
        let (soc, _, p_dis) = apply_action(&c, -0.5, 0.25);
        let delta = 0.5 - soc;
        assert!(delta > 0.0);
        assert!((p_dis * 0.25 - delta * 50.0 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn arrivals_set_soc_and_departures_vacate() {
        let mut fleet = Fleet::new(&[3, 5]);
        let s = session();
        let departed = fleet.process_arrivals_departures(4, &[s.clone()]).unwrap();
        assert!(departed.is_empty());
        assert!(fleet.chargers[0].occupied());
        assert_eq!(fleet.chargers[0].soc, 0.4);
        assert!(!fleet.chargers[1].occupied());

        // Nothing happens in between.
        for t in 5..40 {
            assert!(fleet
                .process_arrivals_departures(t, &[s.clone()])
                .unwrap()
                .is_empty());
        }
        fleet.chargers[0].soc = 0.9;
        let departed = fleet.process_arrivals_departures(40, &[s.clone()]).unwrap();
        assert_eq!(departed.len(), 1);
        assert!(!fleet.chargers[0].occupied());
        assert!((departed[0].e_depart - 45.0).abs() < 1e-12);
        assert_eq!(departed[0].t_departed, 40);
    }

    #[test]
    fn overlapping_sessions_are_rejected() {
        let mut fleet = Fleet::new(&[3]);
        let s1 = session();
        let mut s2 = session();
        s2.t_arrival = 10;
        s2.t_depart = 20;
        fleet.process_arrivals_departures(4, &[s1.clone()]).unwrap();
        let err = fleet
            .process_arrivals_departures(10, &[s1, s2])
            .unwrap_err();
        assert!(matches!(err, FleetError::OverlappingSessions { .. }));
    }

    #[test]
    fn charger_turnover_within_one_step() {
        let mut fleet = Fleet::new(&[3]);
        let s1 = session();
        let mut s2 = session();
        s2.t_arrival = 40; // arrives exactly when s1 departs
        s2.t_depart = 60;
        fleet.process_arrivals_departures(4, std::slice::from_ref(&s1)).unwrap();
        let departed = fleet.process_arrivals_departures(40, &[s1, s2]).unwrap();
        assert_eq!(departed.len(), 1);
        assert!(fleet.chargers[0].occupied());
    }

    #[test]
    fn force_depart_archives_everyone() {
        let mut fleet = Fleet::new(&[3, 5]);
        let mut s1 = session();
        s1.charger_id = 0;
        let mut s2 = session();
        s2.charger_id = 1;
        fleet.process_arrivals_departures(4, &[s1, s2]).unwrap();
        let departed = fleet.force_depart_all(96);
        assert_eq!(departed.len(), 2);
        assert!(fleet.chargers.iter().all(|c| !c.occupied()));
        assert_eq!(departed[0].t_departed, 96);
    }

    #[test]
    fn satisfaction_ratio() {
        let rec = |e_depart: f64, e_target: f64| DepartedSession {
            session: EVSession {
                e_target,
                ..session()
            },
            e_depart,
            t_departed: 40,
        };
        assert_eq!(user_satisfaction(&rec(45.0, 45.0)), 1.0);
        assert!((user_satisfaction(&rec(40.5, 45.0)) - 0.9).abs() < 1e-12);
        assert_eq!(user_satisfaction(&rec(50.0, 45.0)), 1.0);
        assert_eq!(user_satisfaction(&rec(0.0, 0.0)), 1.0);
    }
}
