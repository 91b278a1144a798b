//! Per-EV allocation of an aggregator's power request.
//!
//! A stake-weighted proposer drafts a headroom-proportional split, every
//! member's limits are enforced by clipping plus water-filling, and all
//! members re-check the corrected plan before it is executed.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

const SUM_TOL: f64 = 1e-9;

/// Collateral an EV locks to take part in proposer selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stake {
    pub ev_id: u32,
    pub locked_energy_kwh: f64,
    pub battery_age_cycles: f64,
    pub random_salt: u64,
}

/// Knobs of the allocation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosConfig {
    /// Fraction of stored energy locked as stake.
    pub stake_fraction: f64,
    /// Age discount reference `w_ref` in `1/(1 + w/w_ref)`.
    pub age_reference_cycles: f64,
    /// Fraction of locked energy slashed on deviation or early departure.
    pub slash_fraction: f64,
}

impl Default for PosConfig {
    fn default() -> Self {
        Self { stake_fraction: 0.1, age_reference_cycles: 1000.0, slash_fraction: 0.05 }
    }
}

/// Limits of one EV for the slot being allocated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocMember {
    pub ev_id: u32,
    pub energy_kwh: f64,
    /// Next-instant energy bounds.
    pub e_lower_kwh: f64,
    pub e_upper_kwh: f64,
    /// Nominal charger limits for the slot (zero when unplugged).
    pub p_discharge_max_kw: f64,
    pub p_charge_max_kw: f64,
    /// State-of-power limits (`sop_discharge ≤ 0 ≤ sop_charge`).
    pub sop_discharge_kw: f64,
    pub sop_charge_kw: f64,
    pub efficiency: f64,
    pub dt_hours: f64,
}

impl AllocMember {
    /// Power interval that keeps the EV inside its power, SOP and energy
    /// limits. When the energy floor demands more than the power limits
    /// allow, the upper limit wins.
    pub fn power_box(&self) -> (f64, f64) {
        let rate = self.efficiency * self.dt_hours;
        let hi = self.p_charge_max_kw.min(self.sop_charge_kw).min((self.e_upper_kwh - self.energy_kwh) / rate);
        let lo = self.p_discharge_max_kw.max(self.sop_discharge_kw).max((self.e_lower_kwh - self.energy_kwh) / rate);
        (lo.min(hi), hi)
    }

    /// Power box restricted to the request's direction. An EV whose energy
    /// floor forces it to charge keeps that floor even for a discharge
    /// request.
    pub fn directed_box(&self, request_kw: f64) -> (f64, f64) {
        let (lo, hi) = self.power_box();
        if request_kw >= 0.0 {
            (lo.max(0.0).min(hi), hi)
        } else {
            (lo, hi.min(0.0).max(lo))
        }
    }

    /// Energy headroom toward the bound the request moves the EV to.
    pub fn headroom_kwh(&self, request_kw: f64) -> f64 {
        if request_kw >= 0.0 {
            (self.e_upper_kwh - self.energy_kwh).max(0.0)
        } else {
            (self.energy_kwh - self.e_lower_kwh).max(0.0)
        }
    }
}

/// Per-EV powers for one aggregator and slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub ev_ids: Vec<u32>,
    pub power_kw: Vec<f64>,
    pub requested_kw: f64,
    pub residual_kw: f64,
    pub proposer_id: Option<u32>,
    pub validated: bool,
}

impl AllocationPlan {
    pub fn allocated_kw(&self) -> f64 {
        self.power_kw.iter().sum()
    }
}

pub fn build_stakes(members: &[AllocMember], ages: &[f64], salt_seed: u64, cfg: &PosConfig) -> Vec<Stake> {
    members
        .iter()
        .zip(ages)
        .map(|(m, &w)| Stake {
            ev_id: m.ev_id,
            locked_energy_kwh: (cfg.stake_fraction * m.energy_kwh).max(0.0),
            battery_age_cycles: w,
            random_salt: salt_seed ^ (m.ev_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        })
        .collect()
}

/// Stake-weighted draw with weight `locked · 1/(1 + w/w_ref)`; uniform when
/// every weight is zero. `None` only for an empty stake list.
pub fn select_proposer<R: Rng + ?Sized>(stakes: &[Stake], age_reference_cycles: f64, rng: &mut R) -> Option<u32> {
    if stakes.is_empty() {
        return None;
    }
    let weights: Vec<f64> = stakes
        .iter()
        .map(|s| {
            let w = s.locked_energy_kwh / (1.0 + s.battery_age_cycles.max(0.0) / age_reference_cycles);
            if w.is_finite() {
                w.max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let idx = match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..stakes.len()),
    };
    Some(stakes[idx].ev_id)
}

/// Seeded variant of [`select_proposer`].
pub fn select_proposer_seeded(stakes: &[Stake], age_reference_cycles: f64, seed: u64) -> Option<u32> {
    select_proposer(stakes, age_reference_cycles, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Headroom-proportional shares of a request (summing to 1), or all zeros
/// when no member has headroom in the request's direction.
pub fn energy_weights(members: &[AllocMember], request_kw: f64) -> Vec<f64> {
    let room: Vec<f64> = members.iter().map(|m| m.headroom_kwh(request_kw)).collect();
    let total: f64 = room.iter().sum();
    if total <= 0.0 {
        return vec![0.0; members.len()];
    }
    room.iter().map(|r| r / total).collect()
}

/// Draft plan: the request split by energy weights.
pub fn propose_allocation(proposer: Option<u32>, request_kw: f64, members: &[AllocMember]) -> AllocationPlan {
    let shares = energy_weights(members, request_kw);
    let power_kw: Vec<f64> = shares.iter().map(|s| s * request_kw).collect();
    let residual_kw = request_kw - power_kw.iter().sum::<f64>();
    AllocationPlan {
        ev_ids: members.iter().map(|m| m.ev_id).collect(),
        power_kw,
        requested_kw: request_kw,
        residual_kw,
        proposer_id: proposer,
        validated: false,
    }
}

/// Clip every EV to its directed power box, then water-fill the gap to the
/// request in proportion to remaining room. If the directed boxes cannot
/// reach the request (an EV forced to charge under a small charge request),
/// the gap is filled once more over the full boxes. Whatever cannot be
/// placed is left as residual.
pub fn safety_correct(plan: &AllocationPlan, members: &[AllocMember]) -> AllocationPlan {
    let request = plan.requested_kw;
    let directed: Vec<(f64, f64)> = members.iter().map(|m| m.directed_box(request)).collect();
    let mut p: Vec<f64> = plan.power_kw.iter().zip(&directed).map(|(&x, &(lo, hi))| x.clamp(lo, hi)).collect();
    water_fill(&mut p, &directed, request);
    if (request - p.iter().sum::<f64>()).abs() > SUM_TOL {
        let full: Vec<(f64, f64)> = members.iter().map(|m| m.power_box()).collect();
        water_fill(&mut p, &full, request);
    }
    let residual_kw = request - p.iter().sum::<f64>();
    AllocationPlan { power_kw: p, residual_kw, validated: false, ..plan.clone() }
}

fn water_fill(p: &mut [f64], boxes: &[(f64, f64)], request: f64) {
    for _ in 0..p.len() + 1 {
        let gap = request - p.iter().sum::<f64>();
        if gap.abs() <= SUM_TOL {
            break;
        }
        let room: Vec<f64> = p
            .iter()
            .zip(boxes)
            .map(|(&x, &(lo, hi))| if gap > 0.0 { (hi - x).max(0.0) } else { (x - lo).max(0.0) })
            .collect();
        let total: f64 = room.iter().sum();
        if total <= 0.0 {
            break;
        }
        let frac = (gap.abs() / total).min(1.0);
        for ((x, r), &(lo, hi)) in p.iter_mut().zip(&room).zip(boxes) {
            *x = (*x + gap.signum() * frac * r).clamp(lo, hi);
        }
        if frac >= 1.0 {
            break;
        }
    }
}

/// Unanimous deterministic re-check of a plan by every member.
pub fn validate_plan(plan: &AllocationPlan, members: &[AllocMember]) -> bool {
    if plan.power_kw.len() != members.len() || plan.ev_ids.len() != members.len() {
        return false;
    }
    let sum_ok = (plan.allocated_kw() + plan.residual_kw - plan.requested_kw).abs() <= SUM_TOL;
    sum_ok
        && members.iter().zip(&plan.power_kw).zip(&plan.ev_ids).all(|((m, &x), &id)| {
            let (lo, hi) = m.power_box();
            let e_next = m.energy_kwh + m.efficiency * x * m.dt_hours;
            let tol = SUM_TOL * (1.0 + m.energy_kwh.abs());
            id == m.ev_id
                && x >= lo - SUM_TOL
                && x <= hi + SUM_TOL
                && e_next >= m.e_lower_kwh.min(m.energy_kwh + m.efficiency * lo * m.dt_hours) - tol
                && e_next <= m.e_upper_kwh + tol
        })
}

/// Full allocation path: stake draw, proposal, correction, validation.
pub fn allocate<R: Rng + ?Sized>(
    request_kw: f64,
    members: &[AllocMember],
    ages: &[f64],
    cfg: &PosConfig,
    rng: &mut R,
) -> AllocationPlan {
    let stakes = build_stakes(members, ages, rng.random(), cfg);
    let proposer = select_proposer(&stakes, cfg.age_reference_cycles, rng);
    let draft = propose_allocation(proposer, request_kw, members);
    let mut plan = safety_correct(&draft, members);
    plan.validated = validate_plan(&plan, members);
    plan
}

/// Settlement record for one EV and slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub ev_id: u32,
    pub charge_cost: f64,
    pub degradation_cost: f64,
    pub slashed_kwh: f64,
}

/// Energy cost at the slot tariff, degradation share, and stake slashing
/// for members flagged as deviating or leaving early.
pub fn settle_rewards(
    plan: &AllocationPlan,
    stakes: &[Stake],
    tariff: f64,
    dt_hours: f64,
    degradation_delta: &[f64],
    deviated: &[bool],
    cfg: &PosConfig,
) -> Vec<LedgerEntry> {
    plan.ev_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| LedgerEntry {
            ev_id: id,
            charge_cost: tariff * plan.power_kw[i] * dt_hours,
            degradation_cost: degradation_delta.get(i).copied().unwrap_or(0.0),
            slashed_kwh: if deviated.get(i).copied().unwrap_or(false) {
                cfg.slash_fraction * stakes.get(i).map_or(0.0, |s| s.locked_energy_kwh)
            } else {
                0.0
            },
        })
        .collect()
}

/// One row of the allocation audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub slot: u32,
    pub eva: usize,
    pub ev_id: u32,
    pub proposed_kw: f64,
    pub corrected_kw: f64,
    pub soc_before: f64,
    pub soc_after: f64,
    pub validated: bool,
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["slot", "eva", "ev_id", "proposed_kw", "corrected_kw", "soc_before", "soc_after", "validated"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
