//! Long-run battery aging from one repeated scheduling day.
//!
//! Each EV's day is its plugged SOC/current trace followed by a driving
//! segment that discharges it back to its arrival SOC, so the day is a
//! closed loop and can be repeated. The driving segment spreads that
//! energy evenly over the hours spent off the charger.

use serde::{Deserialize, Serialize};

use crate::battery::{count_half_cycles, soh_advance, CellPack, SohParams, SohState};
use crate::env::V2gEnv;
use crate::error::{Error, Result};

/// One EV's repeated day: SOC at every instant and branch current over
/// every slot between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayCycle {
    pub soc: Vec<f64>,
    pub current: Vec<f64>,
}

impl DayCycle {
    /// Close a plugged trace with driving slots at `drive_current` (negative,
    /// amperes) that return the SOC linearly to its first value.
    pub fn closed(soc: &[f64], current: &[f64], drive_slots: usize, drive_current: f64) -> Result<Self> {
        if soc.len() != current.len() + 1 {
            return Err(Error::Dimension { expected: current.len() + 1, got: soc.len() });
        }
        let (mut s, mut c) = (soc.to_vec(), current.to_vec());
        let (from, to) = (soc[soc.len() - 1], soc[0]);
        if drive_slots > 0 && from > to {
            for k in 1..=drive_slots {
                s.push(from + (to - from) * k as f64 / drive_slots as f64);
                c.push(drive_current);
            }
        }
        Ok(Self { soc: s, current: c })
    }

    /// Aging state after one more repetition of this day.
    pub fn advance(&self, state: &SohState<f64>, params: &SohParams<f64>) -> SohState<f64> {
        let cycles = count_half_cycles(&self.soc, &self.current, params.dod_floor);
        let (lo, hi) = self.soc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        if !lo.is_finite() {
            return state.clone();
        }
        soh_advance(state, params, &cycles, 0.5 * (hi + lo), hi - lo)
    }
}

/// Closed day cycles of every EV in an env whose episode has finished.
pub fn day_cycles_from_env(env: &V2gEnv) -> Result<Vec<DayCycle>> {
    let cfg = env.config();
    let dt = cfg.dt_hours;
    env.fleet()
        .iter()
        .zip(env.soc_traces())
        .zip(env.current_traces())
        .zip(env.ev_states())
        .map(|(((ev, soc), current), st)| {
            let plugged_hours = (ev.departure_slot - ev.arrival_slot) as f64 * dt;
            let drive_slots = ((24.0 - plugged_hours) / dt).round().max(1.0) as usize;
            let (first, last) = (soc[0], soc[soc.len() - 1]);
            let q = ev.effective_capacity(&st.soh);
            // energy leaving the battery, drawn evenly while driving
            let drive_kw = -((last - first).max(0.0) * q) / (drive_slots as f64 * dt);
            let mut pack: CellPack<f64> = cfg.pack.clone();
            pack.capacity_scale = ev.capacity_kwh * 1000.0 / pack.nominal_energy_wh();
            DayCycle::closed(soc, current, drive_slots, pack.branch_current(drive_kw))
        })
        .collect()
}

/// Mean SOH over the fleet after each of `days` repetitions, starting
/// with the initial mean at index 0.
pub fn simulate_year(
    initial: &[SohState<f64>],
    cycles: &[DayCycle],
    params: &SohParams<f64>,
    days: usize,
) -> Result<Vec<f64>> {
    if initial.len() != cycles.len() {
        return Err(Error::Dimension { expected: initial.len(), got: cycles.len() });
    }
    let n = initial.len().max(1) as f64;
    let mut states = initial.to_vec();
    let mut series = Vec::with_capacity(days + 1);
    series.push(states.iter().map(|s| s.soh_percent).sum::<f64>() / n);
    for _ in 0..days {
        for (s, c) in states.iter_mut().zip(cycles) {
            let mut next = c.advance(s, params);
            // the history only feeds the next ratio; keep it short over a year
            let keep = next.half_cycle_history.len().saturating_sub(2);
            next.half_cycle_history.drain(..keep);
            *s = next;
        }
        series.push(states.iter().map(|s| s.soh_percent).sum::<f64>() / n);
    }
    Ok(series)
}
