//! Constrained multi-agent environment over the overnight scheduling window.
//!
//! Each agent is one aggregator. Its action in `[-1, 1]` is mapped onto the
//! aggregate charger range of its plugged EVs, clipped to what the EVs can
//! absorb or deliver in the slot, jointly projected onto the tie-line
//! limits and finally split across EVs by the allocator.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::battery::{
    count_half_cycles, soc_step, soh_advance, sop_power_limits, CellPack, OcvCurve, SohParams, SohState, SopWindow,
};
use crate::error::{Error, Result};
use crate::fleet::{
    build_envelope, ev_energy_bounds, partition_evas, sample_fleet, EvSpec, EvState, FleetDistribution, FleetEnvelope,
};
use crate::microgrid::{cost_f3, load_variance, DegradationPrice, GridDay, SyntheticProfile, SLOTS_PER_DAY};
use crate::pos::{allocate, AllocMember, AuditRow, PosConfig};

/// Features per agent observation: 24 load values, energy, variance,
/// tariff and energy change.
pub const OBS_DIM: usize = SLOTS_PER_DAY + 4;

const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub fleet_size: usize,
    pub horizon: usize,
    /// Absolute hour of the first slot.
    pub window_start: u32,
    pub dt_hours: f64,
    /// Budget on the discounted per-agent cost.
    pub cost_limit: f64,
    /// β: keeps the reward denominator positive.
    pub reward_offset: f64,
    /// Fleet size the cost weights were calibrated for; power terms of the
    /// reward are scaled by `reward_reference_fleet / fleet_size`.
    pub reward_reference_fleet: f64,
    pub charging_weight: f64,
    pub degradation_weight: f64,
    /// Draw a new fleet and partition on every reset; otherwise `fleet` is used.
    pub resample_fleet: bool,
    pub record_audit: bool,
    pub grid: GridDay,
    pub fleet_dist: FleetDistribution,
    pub fleet: Option<Vec<EvSpec>>,
    pub partition_seed: Option<u64>,
    pub initial_soh: SohState<f64>,
    pub soh_params: SohParams<f64>,
    pub price: DegradationPrice<f64>,
    pub pack: CellPack<f64>,
    pub ocv: OcvCurve<f64>,
    pub cell_u_min: f64,
    pub cell_u_max: f64,
    pub pos: PosConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let sop = SopWindow::<f64>::default();
        Self {
            n_agents: 2,
            fleet_size: 20,
            horizon: 20,
            window_start: 15,
            dt_hours: 1.0,
            cost_limit: 0.1,
            reward_offset: 1.0,
            reward_reference_fleet: 509.0,
            charging_weight: 1.0,
            degradation_weight: 1.0,
            resample_fleet: true,
            record_audit: false,
            grid: GridDay::synthetic(&SyntheticProfile { households: 20.0, ..SyntheticProfile::default() })
                .expect("default synthetic day is valid"),
            fleet_dist: FleetDistribution::default(),
            fleet: None,
            partition_seed: None,
            initial_soh: SohState::default(),
            soh_params: SohParams::default(),
            price: DegradationPrice::default(),
            pack: CellPack::default_vehicle(),
            ocv: OcvCurve::lfp_default(),
            cell_u_min: sop.u_min,
            cell_u_max: sop.u_max,
            pos: PosConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("env horizon must be ≥ 1".into()));
        }
        if !(self.cost_limit >= 0.0) {
            return Err(Error::Config("cost limit must be ≥ 0".into()));
        }
        if !(self.dt_hours > 0.0) || !(self.reward_offset > 0.0) || !(self.reward_reference_fleet > 0.0) {
            return Err(Error::Config("dt, reward offset and reference fleet must be > 0".into()));
        }
        let fleet_len = self.fleet.as_ref().map_or(self.fleet_size, |f| f.len());
        if self.n_agents == 0 || self.n_agents > fleet_len {
            return Err(Error::Config(format!("{} agents cannot split {fleet_len} EVs", self.n_agents)));
        }
        if !self.resample_fleet && self.fleet.is_none() {
            return Err(Error::Config("a fixed-fleet environment needs a fleet".into()));
        }
        if let Some(f) = &self.fleet {
            for ev in f {
                ev.validate()?;
            }
        }
        self.fleet_dist.validate()?;
        self.grid.validate()?;
        self.pack.validate()
    }
}

/// `−1 → p_lower`, `+1 → p_upper`, affine in between.
pub fn scale_action(raw: f64, p_lower_kw: f64, p_upper_kw: f64) -> Result<f64> {
    if p_lower_kw > p_upper_kw {
        return Err(Error::Invalid(format!("action bounds reversed: {p_lower_kw} > {p_upper_kw}")));
    }
    Ok(p_lower_kw + 0.5 * (raw + 1.0) * (p_upper_kw - p_lower_kw))
}

/// Clip an aggregate power so the energy at the end of slot `slot` stays in
/// the envelope and the power within the slot's bounds. `energy_kwh` is the
/// pool energy at the start of the slot.
pub fn safety_clip(p_eva_kw: f64, env: &FleetEnvelope, slot: usize, energy_kwh: f64, dt: f64) -> (f64, bool) {
    let rate = env.efficiency * dt;
    let lo = env.p_lower_kw[slot].max((env.e_lower_kwh[slot + 1] - energy_kwh) / rate);
    let hi = env.p_upper_kw[slot].min((env.e_upper_kwh[slot + 1] - energy_kwh) / rate);
    let hi = hi.max(lo);
    let clipped = p_eva_kw.clamp(lo, hi);
    (clipped, p_eva_kw < lo - BOUND_TOL || p_eva_kw > hi + BOUND_TOL)
}

/// Shift `powers` within their intervals so `base + Σ powers` lies in
/// `[lo, hi]`, moving each agent in proportion to its room. Returns whether
/// the limits are met.
pub fn project_tie_line(powers: &mut [f64], intervals: &[(f64, f64)], base: f64, lo: f64, hi: f64) -> bool {
    let total = base + powers.iter().sum::<f64>();
    let gap = if total > hi {
        hi - total
    } else if total < lo {
        lo - total
    } else {
        return true;
    };
    let room: Vec<f64> = powers
        .iter()
        .zip(intervals)
        .map(|(&p, &(a, b))| if gap > 0.0 { (b - p).max(0.0) } else { (p - a).max(0.0) })
        .collect();
    let avail: f64 = room.iter().sum();
    if avail > 0.0 {
        let frac = (gap.abs() / avail).min(1.0);
        for ((p, r), &(a, b)) in powers.iter_mut().zip(&room).zip(intervals) {
            *p = (*p + gap.signum() * frac * r).clamp(a, b);
        }
    }
    let total = base + powers.iter().sum::<f64>();
    total >= lo - BOUND_TOL && total <= hi + BOUND_TOL
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub slot: u32,
    pub states: Vec<Vec<f64>>,
    pub raw_actions: Vec<f64>,
    pub scaled_kw: Vec<f64>,
    pub clipped_kw: Vec<f64>,
    /// Power the allocator actually placed on EVs.
    pub realized_kw: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub terminal: bool,
    /// Aggregate energy of each agent after the slot.
    pub energy_kwh: Vec<f64>,
    pub variance_kw2: f64,
    pub total_load_kw: f64,
    pub grid_ok: bool,
}

pub struct V2gEnv {
    cfg: EnvConfig,
    fleet: Vec<EvSpec>,
    partition: Vec<Vec<usize>>,
    states: Vec<EvState>,
    day_start_soh: Vec<SohState<f64>>,
    soc_trace: Vec<Vec<f64>>,
    current_trace: Vec<Vec<f64>>,
    /// Realized load of the 24 hours before the current slot.
    past_load: Vec<f64>,
    step_idx: usize,
    prev_energy: Vec<f64>,
    last_delta: Vec<f64>,
    f3_so_far: f64,
    eva_power_day: Vec<f64>,
    ev_power: Vec<Vec<f64>>,
    energy_traj: Vec<Vec<f64>>,
    start_envelopes: Vec<FleetEnvelope>,
    audit: Vec<AuditRow>,
    rng: ChaCha8Rng,
    uncontrolled: Vec<f64>,
    load_scale: f64,
    tariff_scale: f64,
    obs: Vec<Vec<f64>>,
}

impl V2gEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let uncontrolled = cfg.grid.uncontrolled_load();
        let load_scale = uncontrolled.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-6);
        let tariff_scale = cfg.grid.tariff.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-9);
        let mut env = Self {
            cfg,
            fleet: Vec::new(),
            partition: Vec::new(),
            states: Vec::new(),
            day_start_soh: Vec::new(),
            soc_trace: Vec::new(),
            current_trace: Vec::new(),
            past_load: Vec::new(),
            step_idx: 0,
            prev_energy: Vec::new(),
            last_delta: Vec::new(),
            f3_so_far: 0.0,
            eva_power_day: vec![0.0; SLOTS_PER_DAY],
            ev_power: Vec::new(),
            energy_traj: Vec::new(),
            start_envelopes: Vec::new(),
            audit: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            uncontrolled,
            load_scale,
            tariff_scale,
            obs: Vec::new(),
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    pub fn fleet(&self) -> &[EvSpec] {
        &self.fleet
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn ev_states(&self) -> &[EvState] {
        &self.states
    }

    pub fn is_terminal(&self) -> bool {
        self.step_idx >= self.cfg.horizon
    }

    pub fn current_slot(&self) -> u32 {
        self.cfg.window_start + self.step_idx as u32
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.obs
    }

    /// Concatenated agent observations.
    pub fn global_state(&self) -> Vec<f64> {
        self.obs.concat()
    }

    /// EVA power per hour of day realized so far (zero outside the window).
    pub fn eva_power_day(&self) -> &[f64] {
        &self.eva_power_day
    }

    /// Per-slot, per-EV realized power.
    pub fn ev_power(&self) -> &[Vec<f64>] {
        &self.ev_power
    }

    /// Per-EV SOC at every instant of the window so far.
    pub fn soc_traces(&self) -> &[Vec<f64>] {
        &self.soc_trace
    }

    /// Per-agent aggregate energy at every instant so far.
    pub fn energy_trajectories(&self) -> &[Vec<f64>] {
        &self.energy_traj
    }

    /// Per-agent envelopes built at reset.
    pub fn start_envelopes(&self) -> &[FleetEnvelope] {
        &self.start_envelopes
    }

    pub fn audit_rows(&self) -> &[AuditRow] {
        &self.audit
    }

    pub fn day_start_soh(&self) -> &[SohState<f64>] {
        &self.day_start_soh
    }

    pub fn reset(&mut self, seed: u64) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        self.fleet = match (&cfg.fleet, cfg.resample_fleet) {
            (Some(f), false) => f.clone(),
            _ => sample_fleet(cfg.fleet_size, seed, &cfg.fleet_dist)?,
        };
        let part_seed = if cfg.resample_fleet { seed ^ 0x005E_ED0F_A6E7 } else { cfg.partition_seed.unwrap_or(seed) };
        self.partition = partition_evas(self.fleet.len(), cfg.n_agents, part_seed)?;
        let start = cfg.window_start;
        self.states = self.fleet.iter().map(|ev| EvState::at_arrival(ev, cfg.initial_soh.clone(), start)).collect();
        self.day_start_soh = self.states.iter().map(|s| s.soh.clone()).collect();
        self.soc_trace = self.fleet.iter().zip(&self.states).map(|(ev, s)| vec![s.soc(ev)]).collect();
        self.current_trace = vec![Vec::new(); self.fleet.len()];
        self.past_load =
            (0..SLOTS_PER_DAY).map(|i| self.uncontrolled[hour_of_day(start as i64 - 24 + i as i64)]).collect();
        self.step_idx = 0;
        self.prev_energy = (0..cfg.n_agents).map(|i| self.agent_energy(i)).collect();
        self.last_delta = vec![0.0; cfg.n_agents];
        self.f3_so_far = self.fleet_f3(&self.day_start_soh);
        self.eva_power_day = vec![0.0; SLOTS_PER_DAY];
        self.ev_power.clear();
        self.energy_traj = self.prev_energy.iter().map(|&e| vec![e]).collect();
        self.start_envelopes = (0..cfg.n_agents)
            .map(|i| {
                let members: Vec<_> = self.partition[i].iter().map(|&n| (&self.fleet[n], &self.states[n])).collect();
                build_envelope(&members, start, cfg.horizon, cfg.dt_hours)
            })
            .collect();
        self.audit.clear();
        self.rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA110C);
        self.obs = self.build_observations();
        Ok(self.obs.clone())
    }

    fn agent_energy(&self, agent: usize) -> f64 {
        self.partition[agent].iter().map(|&n| self.states[n].energy_kwh).sum()
    }

    fn fleet_f3(&self, soh: &[SohState<f64>]) -> f64 {
        let pairs: Vec<_> = soh.iter().zip(&self.fleet).map(|(s, ev)| (s, ev.capacity_kwh)).collect();
        cost_f3(&pairs, &self.cfg.price)
    }

    fn alloc_member(&self, n: usize, slot: u32) -> AllocMember {
        let ev = &self.fleet[n];
        let st = &self.states[n];
        let dt = self.cfg.dt_hours;
        let (e_lo, e_hi) = ev_energy_bounds(ev, st, slot, slot + 1, dt);
        let (p_dis, p_ch) = ev.power_bounds(slot);
        let (sop_ch, sop_dis) = if ev.is_plugged(slot) {
            let mut pack = self.cfg.pack.clone();
            pack.capacity_scale = ev.capacity_kwh * 1000.0 / pack.nominal_energy_wh();
            let window = SopWindow {
                soc_min: ev.soc_min,
                soc_max: ev.soc_max,
                horizon_slots: 1,
                slot_hours: dt,
                u_min: self.cfg.cell_u_min,
                u_max: self.cfg.cell_u_max,
            };
            sop_power_limits(&pack, &self.cfg.ocv, st.soc(ev), &window)
        } else {
            (0.0, 0.0)
        };
        AllocMember {
            ev_id: ev.id,
            energy_kwh: st.energy_kwh,
            e_lower_kwh: e_lo,
            e_upper_kwh: e_hi,
            p_discharge_max_kw: p_dis,
            p_charge_max_kw: p_ch,
            sop_discharge_kw: sop_dis,
            sop_charge_kw: sop_ch,
            efficiency: ev.efficiency,
            dt_hours: dt,
        }
    }

    /// Aggregate charger range of an agent in the current slot.
    pub fn action_bounds(&self, agent: usize) -> (f64, f64) {
        let slot = self.current_slot();
        self.partition[agent].iter().fold((0.0, 0.0), |(lo, hi), &n| {
            let (a, b) = self.fleet[n].power_bounds(slot);
            (lo + a, hi + b)
        })
    }

    /// Raw actions in [-1, 1] whose scaled values hit `target_kw` per agent,
    /// saturating at the charger range.
    pub fn raw_action_for(&self, target_kw: &[f64]) -> Vec<f64> {
        (0..self.n_agents())
            .map(|i| {
                let (lo, hi) = self.action_bounds(i);
                if hi - lo > 1e-12 {
                    (2.0 * (target_kw[i] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Per-EV branch current (A) over every slot so far.
    pub fn current_traces(&self) -> &[Vec<f64>] {
        &self.current_trace
    }

    /// Power box of one EV in the current slot, SOP limits included.
    pub fn ev_power_box(&self, n: usize) -> (f64, f64) {
        self.alloc_member(n, self.current_slot()).power_box()
    }

    /// Slots left in the episode.
    pub fn remaining_slots(&self) -> usize {
        self.cfg.horizon - self.step_idx.min(self.cfg.horizon)
    }

    /// Powers the agent's EVs can jointly realize this slot.
    pub fn feasible_interval(&self, agent: usize) -> (f64, f64) {
        let slot = self.current_slot();
        self.partition[agent].iter().fold((0.0, 0.0), |(lo, hi), &n| {
            let (a, b) = self.alloc_member(n, slot).power_box();
            (lo + a, hi + b)
        })
    }

    fn build_observations(&self) -> Vec<Vec<f64>> {
        let h = self.current_slot();
        let mut hist: Vec<f64> = self.past_load[1..].to_vec();
        hist.push(self.uncontrolled[hour_of_day(h as i64)]);
        let var = load_variance(&hist);
        let tariff = self.cfg.grid.tariff[hour_of_day(h as i64)];
        let dt = self.cfg.dt_hours;
        (0..self.cfg.n_agents)
            .map(|i| {
                let mut o: Vec<f64> = hist.iter().map(|p| p / self.load_scale).collect();
                let e = self.agent_energy(i);
                let (mut lo, mut hi) = (0.0, 0.0);
                let mut rate = 0.0;
                for &n in &self.partition[i] {
                    let ev = &self.fleet[n];
                    let (a, b) = ev_energy_bounds(ev, &self.states[n], h, h + 1, dt);
                    lo += a;
                    hi += b;
                    rate += ev.efficiency * ev.p_charge_max_kw * dt;
                }
                let position = if hi - lo > 1e-9 { (e - lo) / (hi - lo) } else { 0.5 };
                o.push(position.clamp(-2.0, 2.0));
                o.push(var / (self.load_scale * self.load_scale));
                o.push(tariff / self.tariff_scale);
                o.push(if rate > 0.0 { self.last_delta[i] / rate } else { 0.0 });
                o
            })
            .collect()
    }

    pub fn step(&mut self, raw_actions: &[f64]) -> Result<Transition> {
        if self.is_terminal() {
            return Err(Error::Terminal);
        }
        let n_agents = self.cfg.n_agents;
        if raw_actions.len() != n_agents {
            return Err(Error::Dimension { expected: n_agents, got: raw_actions.len() });
        }
        if raw_actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite action".into()));
        }
        let slot = self.current_slot();
        let hod = hour_of_day(slot as i64);
        let dt = self.cfg.dt_hours;
        let states_before = self.obs.clone();

        let members: Vec<Vec<AllocMember>> =
            self.partition.iter().map(|evs| evs.iter().map(|&n| self.alloc_member(n, slot)).collect()).collect();
        let mut scaled = Vec::with_capacity(n_agents);
        let mut clipped = Vec::with_capacity(n_agents);
        let mut intervals = Vec::with_capacity(n_agents);
        let mut costs = vec![0.0; n_agents];
        for i in 0..n_agents {
            let (p_lo, p_hi) = self.action_bounds(i);
            let s = scale_action(raw_actions[i].clamp(-1.0, 1.0), p_lo, p_hi)?;
            let (lo, hi) = members[i].iter().map(|m| m.power_box()).fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
            if s < lo - BOUND_TOL || s > hi + BOUND_TOL {
                costs[i] = 1.0;
            }
            scaled.push(s);
            clipped.push(s.clamp(lo, hi));
            intervals.push((lo, hi));
        }

        let base = self.uncontrolled[hod];
        let (tie_lo, tie_hi) = (self.cfg.grid.tie_line_min_kw, self.cfg.grid.tie_line_max_kw());
        let pre_total = base + scaled.iter().sum::<f64>();
        if pre_total < tie_lo - BOUND_TOL || pre_total > tie_hi + BOUND_TOL {
            costs.iter_mut().for_each(|c| *c = 1.0);
        }
        let grid_ok = project_tie_line(&mut clipped, &intervals, base, tie_lo, tie_hi);

        let mut realized = vec![0.0; n_agents];
        let mut slot_power = vec![0.0; self.fleet.len()];
        for i in 0..n_agents {
            let ages: Vec<f64> = self.partition[i].iter().map(|&n| self.states[n].soh.equivalent_full_cycles).collect();
            let plan = allocate(clipped[i], &members[i], &ages, &self.cfg.pos, &mut self.rng);
            realized[i] = plan.allocated_kw();
            for (k, &n) in self.partition[i].iter().enumerate() {
                slot_power[n] = plan.power_kw[k];
                if self.cfg.record_audit {
                    let ev = &self.fleet[n];
                    let before = self.states[n].soc(ev);
                    let after =
                        before + ev.efficiency * plan.power_kw[k] * dt / ev.effective_capacity(&self.states[n].soh);
                    self.audit.push(AuditRow {
                        slot,
                        eva: i,
                        ev_id: ev.id,
                        proposed_kw: plan.requested_kw * crate::pos::energy_weights(&members[i], plan.requested_kw)[k],
                        corrected_kw: plan.power_kw[k],
                        soc_before: before,
                        soc_after: after,
                        validated: plan.validated,
                    });
                }
            }
        }

        for (n, &p) in slot_power.iter().enumerate() {
            let ev = &self.fleet[n];
            let st = &mut self.states[n];
            st.energy_kwh = soc_step(st.energy_kwh, p, ev.efficiency, dt);
            st.plugged = ev.is_plugged(slot + 1);
            let soc = st.soc(ev);
            self.soc_trace[n].push(soc);
            let mut pack = self.cfg.pack.clone();
            pack.capacity_scale = ev.capacity_kwh * 1000.0 / pack.nominal_energy_wh();
            self.current_trace[n].push(pack.branch_current(p));
        }
        self.ev_power.push(slot_power);

        let p_eva: f64 = realized.iter().sum();
        let total_load = base + p_eva;
        self.eva_power_day[hod] += p_eva;
        self.past_load.remove(0);
        self.past_load.push(total_load);
        let variance = load_variance(&self.past_load);

        let provisional = self.provisional_soh();
        let f3 = self.fleet_f3(&provisional);
        let delta_f3 = f3 - self.f3_so_far;
        self.f3_so_far = f3;

        let reward = self.step_reward(variance, hod, p_eva, delta_f3);

        let mut energies = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let e = self.agent_energy(i);
            self.last_delta[i] = (e - self.prev_energy[i]).abs();
            self.prev_energy[i] = e;
            self.energy_traj[i].push(e);
            energies.push(e);
        }

        self.step_idx += 1;
        let terminal = self.is_terminal();
        if terminal {
            for (st, soh) in self.states.iter_mut().zip(provisional) {
                st.soh = soh;
            }
        }
        self.obs = self.build_observations();
        Ok(Transition {
            slot,
            states: states_before,
            raw_actions: raw_actions.to_vec(),
            scaled_kw: scaled,
            clipped_kw: clipped,
            realized_kw: realized,
            reward,
            costs,
            next_states: self.obs.clone(),
            terminal,
            energy_kwh: energies,
            variance_kw2: variance,
            total_load_kw: total_load,
            grid_ok,
        })
    }

    /// `1 / (max(F, 0) + β)` with `F = α·σ² + ψ·P_load + c·P_EVA·dt + ΔF₃`,
    /// power quantities expressed at the reference fleet size.
    fn step_reward(&self, variance: f64, hod: usize, p_eva: f64, delta_f3: f64) -> f64 {
        let cfg = &self.cfg;
        let kappa = cfg.reward_reference_fleet / self.fleet.len() as f64;
        let grid = &cfg.grid;
        let net_load = -grid.pv_kw[hod] - grid.wind_kw[hod] + p_eva;
        let f = grid.fluctuation_coeff * kappa * kappa * variance
            + grid.mean_net_load_coeff * kappa * net_load
            + cfg.charging_weight * grid.tariff[hod] * kappa * p_eva * cfg.dt_hours
            + cfg.degradation_weight * kappa * delta_f3;
        reciprocal_reward(f, cfg.reward_offset)
    }

    /// SOH each EV would have if the day ended now.
    fn provisional_soh(&self) -> Vec<SohState<f64>> {
        let params = &self.cfg.soh_params;
        self.day_start_soh
            .iter()
            .enumerate()
            .map(|(n, start)| {
                let soc = &self.soc_trace[n];
                let cycles = count_half_cycles(soc, &self.current_trace[n], params.dod_floor);
                let (lo, hi) = soc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
                soh_advance(start, params, &cycles, 0.5 * (hi + lo), hi - lo)
            })
            .collect()
    }
}

/// `1 / (max(f, 0) + offset)`.
pub fn reciprocal_reward(f: f64, offset: f64) -> f64 {
    1.0 / (f.max(0.0) + offset)
}

pub fn hour_of_day(hour: i64) -> usize {
    hour.rem_euclid(SLOTS_PER_DAY as i64) as usize
}

/// Run one episode with `policy` mapping observations to raw actions.
pub fn episode_rollout<F>(env: &mut V2gEnv, seed: u64, mut policy: F) -> Result<Vec<Transition>>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let mut obs = env.reset(seed)?;
    let mut out = Vec::with_capacity(env.config().horizon);
    loop {
        let t = env.step(&policy(&obs)?)?;
        obs = t.next_states.clone();
        let done = t.terminal;
        out.push(t);
        if done {
            break;
        }
    }
    for i in 0..env.n_agents() {
        if !crate::fleet::envelope_admits(&env.start_envelopes()[i], &env.energy_trajectories()[i]) {
            return Err(Error::Numeric(format!("agent {i} left its envelope after clipping")));
        }
    }
    Ok(out)
}

/// Episode trajectory as CSV, one row per slot.
pub fn write_trajectory_csv<W: Write>(transitions: &[Transition], out: W) -> Result<()> {
    let n = transitions.first().map_or(0, |t| t.raw_actions.len());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header = vec!["slot".to_string()];
    for i in 0..n {
        header.extend([format!("raw_{i}"), format!("scaled_kw_{i}"), format!("clipped_kw_{i}")]);
    }
    header.push("reward".into());
    header.extend((0..n).map(|i| format!("cost_{i}")));
    header.extend((0..n).map(|i| format!("energy_kwh_{i}")));
    header.push("variance_kw2".into());
    w.write_record(&header)?;
    for t in transitions {
        let mut row = vec![t.slot.to_string()];
        for i in 0..n {
            row.extend([t.raw_actions[i].to_string(), t.scaled_kw[i].to_string(), t.clipped_kw[i].to_string()]);
        }
        row.push(t.reward.to_string());
        row.extend(t.costs.iter().map(|c| c.to_string()));
        row.extend(t.energy_kwh.iter().map(|e| e.to_string()));
        row.push(t.variance_kw2.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
