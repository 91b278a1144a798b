use std::cmp::Ordering;

use super::{BaselineKind, BaselinePlan, PlanEv, PlanningProblem};
use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

/// Each EV charges at full power from arrival until it reaches its upper
/// energy bound, never discharging.
pub fn bl1_uncontrolled(problem: &PlanningProblem) -> BaselinePlan {
    let dt = problem.dt_hours;
    let ev_power_kw = problem
        .evs
        .iter()
        .map(|ev| {
            let mut e = ev.e0_kwh;
            (0..ev.horizon())
                .map(|k| {
                    let room = (ev.e_upper_kwh[k + 1] - e) / (ev.efficiency * dt);
                    let p = ev.p_upper_kw[k].min(room).max(0.0);
                    e += ev.efficiency * p * dt;
                    p
                })
                .collect()
        })
        .collect();
    BaselinePlan {
        kind: BaselineKind::Uncontrolled,
        ev_power_kw,
        shortfall_kwh: vec![0.0; problem.evs.len()],
        converged: true,
        iterations: 0,
    }
}

/// Charge-only valley filling: EVs with the fewest plugged slots go first;
/// each places the energy it needs to fill up at full power into its
/// lowest-load slots (earlier slot on ties).
pub fn bl2_optimal_charging(problem: &PlanningProblem) -> BaselinePlan {
    let dt = problem.dt_hours;
    let h = problem.horizon();
    let mut load: Vec<f64> = problem.slot_index.iter().map(|&d| problem.day_base_kw[d]).collect();
    let mut order: Vec<usize> = (0..problem.evs.len()).collect();
    order.sort_by_key(|&n| ((0..h).filter(|&k| problem.evs[n].plugged(k)).count(), n));
    let mut ev_power_kw = vec![vec![0.0; h]; problem.evs.len()];
    let mut shortfall_kwh = vec![0.0; problem.evs.len()];
    for n in order {
        let ev = &problem.evs[n];
        let mut need = (ev.e_upper_kwh[h] - ev.e0_kwh).max(0.0);
        // charging a slot's box forces regardless of load
        for k in 0..h {
            let p = ev.p_lower_kw[k].max(0.0);
            ev_power_kw[n][k] = p;
            load[k] += p;
            need -= ev.efficiency * p * dt;
        }
        let mut slots: Vec<usize> = (0..h).filter(|&k| ev.p_upper_kw[k] > ev_power_kw[n][k]).collect();
        slots.sort_by(|&a, &b| load[a].partial_cmp(&load[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for k in slots {
            if need <= EPS {
                break;
            }
            let p = (ev.p_upper_kw[k] - ev_power_kw[n][k]).min(need / (ev.efficiency * dt));
            ev_power_kw[n][k] += p;
            load[k] += p;
            need -= ev.efficiency * p * dt;
        }
        shortfall_kwh[n] = need.max(0.0);
    }
    BaselinePlan { kind: BaselineKind::OptimalCharging, ev_power_kw, shortfall_kwh, converged: true, iterations: 0 }
}

/// Reachable energy intervals at every instant with some slots fixed.
fn forward(ev: &PlanEv, fixed: &[Option<f64>], dt: f64) -> Vec<(f64, f64)> {
    let mut f = Vec::with_capacity(fixed.len() + 1);
    f.push((ev.e0_kwh, ev.e0_kwh));
    for (k, x) in fixed.iter().enumerate() {
        let (a, b) = f[k];
        let (da, db) = match x {
            Some(v) => (*v, *v),
            None => (ev.efficiency * ev.p_lower_kw[k] * dt, ev.efficiency * ev.p_upper_kw[k] * dt),
        };
        f.push(((a + da).max(ev.e_lower_kwh[k + 1]), (b + db).min(ev.e_upper_kwh[k + 1])));
    }
    f
}

/// Energy intervals at every instant from which the rest of the day can be
/// completed, ending inside `last`.
fn backward(ev: &PlanEv, fixed: &[Option<f64>], last: (f64, f64), dt: f64) -> Vec<(f64, f64)> {
    let h = fixed.len();
    let mut b = vec![(0.0, 0.0); h + 1];
    b[h] = (last.0.max(ev.e_lower_kwh[h]), last.1.min(ev.e_upper_kwh[h]));
    for k in (0..h).rev() {
        let (lo, hi) = b[k + 1];
        let (da, db) = match fixed[k] {
            Some(v) => (v, v),
            None => (ev.efficiency * ev.p_lower_kw[k] * dt, ev.efficiency * ev.p_upper_kw[k] * dt),
        };
        b[k] = ((lo - db).max(ev.e_lower_kwh[k]), (hi - da).min(ev.e_upper_kwh[k]));
    }
    b
}

/// Minimum-cost schedule of one EV: in order of increasing price every
/// slot takes the largest energy increment that keeps the day feasible.
/// A zero-price slack on the final energy comes first among non-negative
/// prices, so the EV ends as empty as allowed; equal prices favour later
/// slots.
pub(crate) fn min_cost_schedule(ev: &PlanEv, prices: &[f64], dt: f64) -> Result<Vec<f64>> {
    let h = ev.horizon();
    let mut fixed: Vec<Option<f64>> = vec![None; h];
    for k in 0..h {
        if !ev.plugged(k) {
            fixed[k] = Some(0.0);
        }
    }
    let mut last = (ev.e_lower_kwh[h], ev.e_upper_kwh[h]);
    let reach = forward(ev, &fixed, dt);
    if reach.iter().any(|(a, b)| a > &(b + EPS)) {
        return Err(Error::Invalid("EV has no feasible schedule".into()));
    }

    // None = final-energy slack
    let mut items: Vec<Option<usize>> = (0..h).filter(|&k| fixed[k].is_none()).map(Some).collect();
    items.push(None);
    let price = |it: &Option<usize>| it.map_or(0.0, |k| prices[k]);
    items.sort_by(|a, b| {
        price(a).partial_cmp(&price(b)).unwrap_or(Ordering::Equal).then_with(|| match (a, b) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => y.cmp(x),
        })
    });
    for it in items {
        match it {
            None => {
                let f = forward(ev, &fixed, dt);
                let lo = f[h].0.max(last.0);
                last = (lo, lo);
            }
            Some(k) => {
                let f = forward(ev, &fixed, dt);
                let b = backward(ev, &fixed, last, dt);
                let top = ev.efficiency * ev.p_upper_kw[k] * dt;
                let bottom = ev.efficiency * ev.p_lower_kw[k] * dt;
                fixed[k] = Some(top.min(b[k + 1].1 - f[k].0).max(bottom));
            }
        }
    }
    let mut p: Vec<f64> = fixed.iter().map(|x| x.unwrap_or(0.0) / (ev.efficiency * dt)).collect();
    uncross(ev, &mut p, prices, dt);
    Ok(p)
}

/// Cancel discharge against charge in equal-price slots where the energy
/// bounds in between allow it. Cost is unchanged and each discharge is
/// paired with the earliest such charge, which leaves charging as late
/// as the greedy put it.
fn uncross(ev: &PlanEv, p: &mut [f64], prices: &[f64], dt: f64) {
    let h = p.len();
    let g = ev.efficiency * dt;
    for i in 0..h {
        for j in 0..h {
            if p[i] >= -EPS || p[j] <= EPS || (prices[i] - prices[j]).abs() > EPS * prices[i].abs().max(1.0) {
                continue;
            }
            let e = ev.trajectory(p, dt);
            let (a, b) = (i.min(j), i.max(j));
            // i < j raises the energy at instants a+1..=b, i > j lowers it
            let room = (a + 1..=b)
                .map(|t| if i < j { ev.e_upper_kwh[t] - e[t] } else { e[t] - ev.e_lower_kwh[t] })
                .fold(f64::INFINITY, f64::min);
            let d = (-p[i]).min(p[j]).min((room / g).max(0.0));
            p[i] += d;
            p[j] -= d;
        }
    }
}

/// Greedy marginal-price dispatch: charge in the cheapest slots and
/// discharge in the dearest, per EV, within every EV's energy and power
/// bounds. Exact for the linear cost because EVs do not interact.
pub fn bl4_min_cost(problem: &PlanningProblem) -> Result<BaselinePlan> {
    let ev_power_kw = problem
        .evs
        .iter()
        .map(|ev| min_cost_schedule(ev, &problem.tariff, problem.dt_hours))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselinePlan {
        kind: BaselineKind::MinCostV2g,
        ev_power_kw,
        shortfall_kwh: vec![0.0; problem.evs.len()],
        converged: true,
        iterations: 0,
    })
}
