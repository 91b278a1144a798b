//! Reference dispatch strategies planned on per-EV models and replayed
//! through the environment's allocation and safety path.

mod greedy;
mod qp;

use serde::{Deserialize, Serialize};

use crate::env::{hour_of_day, Transition, V2gEnv};
use crate::error::{Error, Result};
use crate::fleet::ev_energy_bounds;
use crate::microgrid::load_variance;

pub use greedy::{bl1_uncontrolled, bl2_optimal_charging, bl4_min_cost};
pub use qp::{bl3_min_variance, QpOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Uncontrolled,
    OptimalCharging,
    MinVarianceV2g,
    MinCostV2g,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [Self::Uncontrolled, Self::OptimalCharging, Self::MinVarianceV2g, Self::MinCostV2g];

    /// Short label (`bl1` … `bl4`).
    pub fn label(self) -> &'static str {
        match self {
            Self::Uncontrolled => "bl1",
            Self::OptimalCharging => "bl2",
            Self::MinVarianceV2g => "bl3",
            Self::MinCostV2g => "bl4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bl1" | "uncontrolled" => Ok(Self::Uncontrolled),
            "bl2" | "optimal_charging" => Ok(Self::OptimalCharging),
            "bl3" | "min_variance_v2g" => Ok(Self::MinVarianceV2g),
            "bl4" | "min_cost_v2g" => Ok(Self::MinCostV2g),
            other => Err(Error::Config(format!("unknown baseline `{other}` (expected bl1..bl4)"))),
        }
    }
}

/// One EV as seen by a planner. Energies are indexed by instant
/// (`0..=H`, instant 0 is now), powers by slot (`0..H`).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEv {
    pub e0_kwh: f64,
    pub e_lower_kwh: Vec<f64>,
    pub e_upper_kwh: Vec<f64>,
    /// Zero in slots where the EV is not plugged in.
    pub p_lower_kw: Vec<f64>,
    pub p_upper_kw: Vec<f64>,
    pub efficiency: f64,
}

impl PlanEv {
    pub fn horizon(&self) -> usize {
        self.p_lower_kw.len()
    }

    /// Whether slot `k` carries a (possibly fixed) power variable.
    fn plugged(&self, k: usize) -> bool {
        self.p_upper_kw[k] != 0.0 || self.p_lower_kw[k] != 0.0
    }

    /// Energy trajectory of a power schedule.
    pub fn trajectory(&self, power_kw: &[f64], dt: f64) -> Vec<f64> {
        let mut e = Vec::with_capacity(power_kw.len() + 1);
        e.push(self.e0_kwh);
        for &p in power_kw {
            let last = *e.last().unwrap();
            e.push(last + self.efficiency * p * dt);
        }
        e
    }

    /// Whether a schedule respects the power boxes and energy bounds.
    pub fn admits(&self, power_kw: &[f64], dt: f64, tol: f64) -> bool {
        let boxes =
            power_kw.iter().enumerate().all(|(k, &p)| p >= self.p_lower_kw[k] - tol && p <= self.p_upper_kw[k] + tol);
        let traj = self.trajectory(power_kw, dt);
        boxes
            && traj
                .iter()
                .enumerate()
                .skip(1)
                .all(|(k, &e)| e >= self.e_lower_kwh[k] - tol && e <= self.e_upper_kwh[k] + tol)
    }
}

/// Planning view of one scheduling day.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningProblem {
    pub evs: Vec<PlanEv>,
    /// Uncontrolled load over every slot the variance is taken over.
    pub day_base_kw: Vec<f64>,
    /// Index into `day_base_kw` of each planning slot.
    pub slot_index: Vec<usize>,
    pub tariff: Vec<f64>,
    pub dt_hours: f64,
}

impl PlanningProblem {
    pub fn horizon(&self) -> usize {
        self.slot_index.len()
    }

    /// The rest of the current episode, seen from the env's live state.
    /// Slots already dispatched count towards the day load; the first slot
    /// uses the EVs' actual power boxes, later ones their charger limits.
    pub fn from_env(env: &V2gEnv) -> Self {
        let cfg = env.config();
        let now = env.current_slot();
        let h = env.remaining_slots();
        let dt = cfg.dt_hours;
        let evs = env
            .fleet()
            .iter()
            .zip(env.ev_states())
            .enumerate()
            .map(|(n, (spec, st))| {
                let (mut lo, mut hi) = (Vec::with_capacity(h + 1), Vec::with_capacity(h + 1));
                for k in 0..=h {
                    let (a, b) = ev_energy_bounds(spec, st, now, now + k as u32, dt);
                    lo.push(a);
                    hi.push(b);
                }
                let (mut pl, mut pu): (Vec<f64>, Vec<f64>) = (0..h).map(|k| spec.power_bounds(now + k as u32)).unzip();
                if h > 0 && spec.is_plugged(now) {
                    (pl[0], pu[0]) = env.ev_power_box(n);
                }
                PlanEv {
                    e0_kwh: st.energy_kwh,
                    e_lower_kwh: lo,
                    e_upper_kwh: hi,
                    p_lower_kw: pl,
                    p_upper_kw: pu,
                    efficiency: spec.efficiency,
                }
            })
            .collect();
        let slot_index: Vec<usize> = (0..h).map(|k| hour_of_day(now as i64 + k as i64)).collect();
        let tariff = slot_index.iter().map(|&d| cfg.grid.tariff[d]).collect();
        let day_base_kw = cfg.grid.uncontrolled_load().iter().zip(env.eva_power_day()).map(|(b, p)| b + p).collect();
        Self { evs, day_base_kw, slot_index, tariff, dt_hours: dt }
    }

    /// Day load with a fleet schedule `[ev][slot]` added.
    pub fn day_load(&self, ev_power_kw: &[Vec<f64>]) -> Vec<f64> {
        let mut load = self.day_base_kw.clone();
        for p in ev_power_kw {
            for (k, &d) in self.slot_index.iter().enumerate() {
                load[d] += p[k];
            }
        }
        load
    }

    pub fn variance(&self, ev_power_kw: &[Vec<f64>]) -> f64 {
        load_variance(&self.day_load(ev_power_kw))
    }

    /// `Σ c·P·dt` of a fleet schedule.
    pub fn energy_cost(&self, ev_power_kw: &[Vec<f64>]) -> f64 {
        ev_power_kw.iter().map(|p| p.iter().zip(&self.tariff).map(|(p, c)| c * p * self.dt_hours).sum::<f64>()).sum()
    }
}

/// A planned fleet schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePlan {
    pub kind: BaselineKind,
    /// `[ev][slot]`, kW.
    pub ev_power_kw: Vec<Vec<f64>>,
    /// Energy each EV could not receive before leaving (BL2 only).
    pub shortfall_kwh: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl BaselinePlan {
    /// Aggregate `[slot][agent]` power under a partition.
    pub fn eva_power(&self, partition: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let h = self.ev_power_kw.first().map_or(0, Vec::len);
        (0..h)
            .map(|k| partition.iter().map(|part| part.iter().map(|&n| self.ev_power_kw[n][k]).sum()).collect())
            .collect()
    }

    pub fn discharges(&self) -> bool {
        self.ev_power_kw.iter().flatten().any(|&p| p < 0.0)
    }
}

pub fn plan_baseline(kind: BaselineKind, problem: &PlanningProblem, qp: &QpOptions) -> Result<BaselinePlan> {
    match kind {
        BaselineKind::Uncontrolled => Ok(bl1_uncontrolled(problem)),
        BaselineKind::OptimalCharging => Ok(bl2_optimal_charging(problem)),
        BaselineKind::MinVarianceV2g => bl3_min_variance(problem, qp),
        BaselineKind::MinCostV2g => bl4_min_cost(problem),
    }
}

/// Drive `env` through the rest of its episode with `kind`, replanning
/// from the live state before every slot and sending the first slot's
/// per-aggregator totals as actions. The returned plan holds the power
/// each EV actually received.
pub fn replay(env: &mut V2gEnv, kind: BaselineKind, qp: &QpOptions) -> Result<(BaselinePlan, Vec<Transition>)> {
    let first = env.current_slot() - env.config().window_start;
    let mut steps = Vec::with_capacity(env.remaining_slots());
    let mut shortfall = None;
    let (mut converged, mut iterations) = (true, 0);
    while !env.is_terminal() {
        let problem = PlanningProblem::from_env(env);
        let plan = plan_baseline(kind, &problem, qp)?;
        shortfall.get_or_insert_with(|| plan.shortfall_kwh.clone());
        converged &= plan.converged;
        iterations += plan.iterations;
        let raw = env.raw_action_for(&plan.eva_power(env.partition())[0]);
        steps.push(env.step(&raw)?);
    }
    let n_ev = env.fleet().len();
    let ev_power_kw =
        (0..n_ev).map(|n| env.ev_power()[first as usize..].iter().map(|slot| slot[n]).collect()).collect();
    Ok((
        BaselinePlan {
            kind,
            ev_power_kw,
            shortfall_kwh: shortfall.unwrap_or_else(|| vec![0.0; n_ev]),
            converged,
            iterations,
        },
        steps,
    ))
}

/// Reset `env` to `seed` and run `kind` over the whole episode.
pub fn run_baseline(
    env: &mut V2gEnv,
    seed: u64,
    kind: BaselineKind,
    qp: &QpOptions,
) -> Result<(BaselinePlan, Vec<Transition>)> {
    env.reset(seed)?;
    replay(env, kind, qp)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A single-EV problem with unit efficiency and hourly slots.
    pub fn ev(e0: f64, lo: f64, hi: f64, depart: (f64, f64), p: (f64, f64), plugged: &[bool]) -> PlanEv {
        let h = plugged.len();
        let mut e_lower = vec![lo; h + 1];
        let mut e_upper = vec![hi; h + 1];
        let last = plugged.iter().rposition(|&b| b).map_or(0, |k| k + 1);
        for k in last..=h {
            e_lower[k] = e_lower[k].max(depart.0);
            e_upper[k] = e_upper[k].min(depart.1);
        }
        e_lower[0] = e0;
        e_upper[0] = e0;
        PlanEv {
            e0_kwh: e0,
            e_lower_kwh: e_lower,
            e_upper_kwh: e_upper,
            p_lower_kw: plugged.iter().map(|&b| if b { p.0 } else { 0.0 }).collect(),
            p_upper_kw: plugged.iter().map(|&b| if b { p.1 } else { 0.0 }).collect(),
            efficiency: 1.0,
        }
    }

    pub fn problem(evs: Vec<PlanEv>, base: Vec<f64>, tariff: Vec<f64>) -> PlanningProblem {
        let h = base.len();
        PlanningProblem { evs, day_base_kw: base, slot_index: (0..h).collect(), tariff, dt_hours: 1.0 }
    }
}
