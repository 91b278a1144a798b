//! EV population, aggregator partitioning and aggregate flexibility envelopes.
//!
//! Time is measured in absolute hours from midnight of the arrival day, so a
//! departure at 08:00 the next morning is hour 32. Energy "instants" sit on
//! hour boundaries; slot `h` is the hour between instants `h` and `h + 1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::battery::SohState;
use crate::error::{Error, Result};

/// Static parameters of one EV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub id: u32,
    pub capacity_kwh: f64,
    pub p_charge_max_kw: f64,
    /// Negative.
    pub p_discharge_max_kw: f64,
    /// Absolute hour the EV plugs in.
    pub arrival_slot: u32,
    /// Absolute hour the EV leaves (exclusive end of its last plugged slot).
    pub departure_slot: u32,
    pub soc_arrival: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_depart_low: f64,
    pub soc_depart_high: f64,
    pub efficiency: f64,
}

impl EvSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.soc_min <= self.soc_arrival
            && self.soc_arrival <= self.soc_max
            && self.soc_min < self.soc_depart_low
            && self.soc_depart_low <= self.soc_depart_high
            && self.soc_depart_high <= self.soc_max
            && self.p_discharge_max_kw < 0.0
            && self.p_charge_max_kw > 0.0
            && self.capacity_kwh > 0.0
            && self.efficiency > 0.0
            && self.efficiency <= 1.0
            && self.arrival_slot < self.departure_slot;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("EV {} violates its parameter invariants", self.id)))
        }
    }

    pub fn is_plugged(&self, slot: u32) -> bool {
        self.arrival_slot <= slot && slot < self.departure_slot
    }

    /// Plugged slots in `[from, to)`.
    pub fn plugged_slots(&self, from: u32, to: u32) -> u32 {
        let a = from.max(self.arrival_slot);
        let b = to.min(self.departure_slot);
        b.saturating_sub(a)
    }

    /// Effective capacity after fade.
    pub fn effective_capacity(&self, soh: &SohState<f64>) -> f64 {
        self.capacity_kwh * soh.fraction()
    }

    /// (discharge, charge) power bounds for slot `slot`; zero when unplugged.
    pub fn power_bounds(&self, slot: u32) -> (f64, f64) {
        if self.is_plugged(slot) {
            (self.p_discharge_max_kw, self.p_charge_max_kw)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Evolving state of one EV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvState {
    pub energy_kwh: f64,
    pub plugged: bool,
    pub soh: SohState<f64>,
}

impl EvState {
    /// State at the start of a scheduling window beginning at `now`.
    pub fn at_arrival(spec: &EvSpec, soh: SohState<f64>, now: u32) -> Self {
        let energy_kwh = spec.soc_arrival * spec.capacity_kwh * soh.fraction();
        Self { energy_kwh, plugged: spec.is_plugged(now), soh }
    }

    pub fn soc(&self, spec: &EvSpec) -> f64 {
        self.energy_kwh / spec.effective_capacity(&self.soh)
    }
}

/// Energy bounds `(lower, upper)` of one EV at instant `t`, seen from its
/// state at instant `now ≤ t`.
///
/// Combines the SOC window, the departure window pulled backwards at full
/// power, and what is reachable from the current energy through the
/// plugged slots in between. After departure (or before `now` reaches
/// arrival) the energy is frozen.
pub fn ev_energy_bounds(spec: &EvSpec, state: &EvState, now: u32, t: u32, dt: f64) -> (f64, f64) {
    let e = state.energy_kwh;
    if now >= spec.departure_slot {
        return (e, e);
    }
    let t = t.min(spec.departure_slot);
    let q = spec.effective_capacity(&state.soh);
    let eta = spec.efficiency;
    let reach = spec.plugged_slots(now, t) as f64 * dt;
    let to_go = spec.plugged_slots(t, spec.departure_slot) as f64 * dt;

    let mut hi = (spec.soc_max * q)
        .min(spec.soc_depart_high * q - eta * spec.p_discharge_max_kw * to_go)
        .min(e + eta * spec.p_charge_max_kw * reach);
    let lo = (spec.soc_min * q)
        .max(spec.soc_depart_low * q - eta * spec.p_charge_max_kw * to_go)
        .max(e + eta * spec.p_discharge_max_kw * reach);
    // a state outside its window (only possible for invalid inputs) collapses to the reachable edge
    if hi < lo {
        hi = lo;
    }
    (lo, hi)
}

/// Distribution of the generated EV population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetDistribution {
    pub arrival_mean: f64,
    pub arrival_std: f64,
    pub arrival_min: f64,
    pub arrival_max: f64,
    /// Hour of day on the following morning.
    pub departure_mean: f64,
    pub departure_std: f64,
    pub departure_min: f64,
    pub departure_max: f64,
    pub soc_mean: f64,
    pub soc_std: f64,
    pub soc_low: f64,
    pub soc_high: f64,
    pub capacity_kwh: f64,
    pub p_charge_max_kw: f64,
    pub p_discharge_max_kw: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_depart_low: f64,
    pub soc_depart_high: f64,
    pub efficiency: f64,
}

impl Default for FleetDistribution {
    fn default() -> Self {
        Self {
            arrival_mean: 18.0,
            arrival_std: 1.0,
            arrival_min: 15.0,
            arrival_max: 21.0,
            departure_mean: 8.0,
            departure_std: 1.0,
            departure_min: 6.0,
            departure_max: 10.0,
            soc_mean: 0.5,
            soc_std: 0.1,
            soc_low: 0.2,
            soc_high: 0.8,
            capacity_kwh: 24.0,
            p_charge_max_kw: 6.0,
            p_discharge_max_kw: -6.0,
            soc_min: 0.2,
            soc_max: 0.9,
            soc_depart_low: 0.8,
            soc_depart_high: 0.9,
            efficiency: 0.95,
        }
    }
}

impl FleetDistribution {
    pub fn validate(&self) -> Result<()> {
        let stds = [self.arrival_std, self.departure_std, self.soc_std];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("distribution standard deviations must be finite and ≥ 0".into()));
        }
        let ranges = [
            (self.arrival_min, self.arrival_max),
            (self.departure_min, self.departure_max),
            (self.soc_low, self.soc_high),
        ];
        if ranges.iter().any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("distribution clip ranges must satisfy min ≤ max".into()));
        }
        if !(0.0..24.0).contains(&self.arrival_min) || self.arrival_max >= 24.0 {
            return Err(Error::Config("arrival hours must lie in [0, 24)".into()));
        }
        if self.departure_min < 0.0 || self.departure_max + 24.0 <= self.arrival_max {
            return Err(Error::Config("departure must follow arrival".into()));
        }
        let probe = EvSpec {
            id: 0,
            capacity_kwh: self.capacity_kwh,
            p_charge_max_kw: self.p_charge_max_kw,
            p_discharge_max_kw: self.p_discharge_max_kw,
            arrival_slot: 0,
            departure_slot: 1,
            soc_arrival: self.soc_low.max(self.soc_min),
            soc_min: self.soc_min,
            soc_max: self.soc_max,
            soc_depart_low: self.soc_depart_low,
            soc_depart_high: self.soc_depart_high,
            efficiency: self.efficiency,
        };
        probe.validate().map_err(|_| Error::Config("EV parameter defaults are inconsistent".into()))?;
        if self.soc_low < self.soc_min || self.soc_high > self.soc_max {
            return Err(Error::Config("arrival SOC range must lie inside [soc_min, soc_max]".into()));
        }
        Ok(())
    }
}

fn clipped_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let x = if std == 0.0 { mean } else { Normal::new(mean, std).expect("validated std").sample(rng) };
    x.clamp(lo, hi)
}

/// Draw `count` EVs. Deterministic per seed.
pub fn sample_fleet(count: usize, seed: u64, dist: &FleetDistribution) -> Result<Vec<EvSpec>> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Vec::with_capacity(count);
    for id in 0..count {
        let arrival =
            clipped_normal(&mut rng, dist.arrival_mean, dist.arrival_std, dist.arrival_min, dist.arrival_max).round();
        let departure =
            clipped_normal(&mut rng, dist.departure_mean, dist.departure_std, dist.departure_min, dist.departure_max)
                .round();
        let soc = clipped_normal(&mut rng, dist.soc_mean, dist.soc_std, dist.soc_low, dist.soc_high);
        let spec = EvSpec {
            id: id as u32,
            capacity_kwh: dist.capacity_kwh,
            p_charge_max_kw: dist.p_charge_max_kw,
            p_discharge_max_kw: dist.p_discharge_max_kw,
            arrival_slot: arrival as u32,
            departure_slot: 24 + departure as u32,
            soc_arrival: soc,
            soc_min: dist.soc_min,
            soc_max: dist.soc_max,
            soc_depart_low: dist.soc_depart_low,
            soc_depart_high: dist.soc_depart_high,
            efficiency: dist.efficiency,
        };
        spec.validate()?;
        fleet.push(spec);
    }
    Ok(fleet)
}

/// Random near-equal partition of fleet indices into `n_agents` groups.
pub fn partition_evas(fleet_len: usize, n_agents: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_agents == 0 {
        return Err(Error::Config("at least one aggregator is required".into()));
    }
    if n_agents > fleet_len {
        return Err(Error::Config(format!("{n_agents} aggregators for only {fleet_len} EVs")));
    }
    let mut idx: Vec<usize> = (0..fleet_len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = vec![Vec::new(); n_agents];
    for (k, i) in idx.into_iter().enumerate() {
        parts[k % n_agents].push(i);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Aggregate energy/power bounds of an EV pool over a horizon.
///
/// `e_lower[k]`/`e_upper[k]` bound the pool energy at instant `start + k`
/// (`k = 0..=horizon`); `p_lower[k]`/`p_upper[k]` bound the electrical
/// power of slot `start + k` (`k < horizon`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEnvelope {
    pub start: u32,
    pub dt_hours: f64,
    pub efficiency: f64,
    pub e_lower_kwh: Vec<f64>,
    pub e_upper_kwh: Vec<f64>,
    pub p_lower_kw: Vec<f64>,
    pub p_upper_kw: Vec<f64>,
}

impl FleetEnvelope {
    pub fn horizon(&self) -> usize {
        self.p_lower_kw.len()
    }
}

/// Sum per-EV bounds of `members` over `horizon` slots starting at `now`.
pub fn build_envelope(members: &[(&EvSpec, &EvState)], now: u32, horizon: usize, dt: f64) -> FleetEnvelope {
    let mut env = FleetEnvelope {
        start: now,
        dt_hours: dt,
        efficiency: 1.0,
        e_lower_kwh: vec![0.0; horizon + 1],
        e_upper_kwh: vec![0.0; horizon + 1],
        p_lower_kw: vec![0.0; horizon],
        p_upper_kw: vec![0.0; horizon],
    };
    if let Some((s, _)) = members.first() {
        env.efficiency = s.efficiency;
    }
    for (spec, state) in members {
        for k in 0..=horizon {
            let (lo, hi) = ev_energy_bounds(spec, state, now, now + k as u32, dt);
            env.e_lower_kwh[k] += lo;
            env.e_upper_kwh[k] += hi;
        }
        for k in 0..horizon {
            let (pl, pu) = spec.power_bounds(now + k as u32);
            env.p_lower_kw[k] += pl;
            env.p_upper_kw[k] += pu;
        }
    }
    env
}

const ADMIT_TOL: f64 = 1e-9;

/// Whether a pool energy trajectory (instants `start..start+len`) satisfies
/// the per-instant energy bounds and the pairwise energy-change sandwich.
pub fn envelope_admits(env: &FleetEnvelope, energy_traj: &[f64]) -> bool {
    let n = energy_traj.len().min(env.e_lower_kwh.len());
    let scale = 1.0 + energy_traj.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let tol = ADMIT_TOL * scale;
    for k in 0..n {
        if energy_traj[k] < env.e_lower_kwh[k] - tol || energy_traj[k] > env.e_upper_kwh[k] + tol {
            return false;
        }
    }
    let rate = env.efficiency * env.dt_hours;
    for k2 in 0..n {
        let (mut lo_sum, mut hi_sum) = (0.0, 0.0);
        for k1 in k2 + 1..n {
            lo_sum += env.p_lower_kw[k1 - 1] * rate;
            hi_sum += env.p_upper_kw[k1 - 1] * rate;
            let change = energy_traj[k1] - energy_traj[k2];
            let lower = (env.e_lower_kwh[k1] - env.e_upper_kwh[k2]).max(lo_sum);
            let upper = (env.e_upper_kwh[k1] - env.e_lower_kwh[k2]).min(hi_sum);
            if change < lower - tol || change > upper + tol {
                return false;
            }
        }
    }
    true
}

const FLEET_HEADER: [&str; 12] = [
    "id",
    "capacity_kwh",
    "p_charge_max_kw",
    "p_discharge_max_kw",
    "arrival_slot",
    "departure_slot",
    "soc_arrival",
    "soc_min",
    "soc_max",
    "soc_depart_low",
    "soc_depart_high",
    "efficiency",
];

pub fn write_fleet_csv<W: Write>(fleet: &[EvSpec], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(FLEET_HEADER)?;
    for ev in fleet {
        w.serialize(ev)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fleet_csv<R: Read>(input: R) -> Result<Vec<EvSpec>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(FLEET_HEADER.iter().copied()) {
        return Err(Error::Invalid(format!("unexpected fleet CSV header: {:?}", header)));
    }
    let mut fleet = Vec::new();
    for rec in r.deserialize() {
        let ev: EvSpec = rec?;
        ev.validate()?;
        fleet.push(ev);
    }
    Ok(fleet)
}

pub fn save_fleet(fleet: &[EvSpec], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_fleet_csv(fleet, std::io::BufWriter::new(f))
}

pub fn load_fleet(path: &Path) -> Result<Vec<EvSpec>> {
    read_fleet_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(arrival: u32, departure: u32) -> EvSpec {
        EvSpec {
            id: 0,
            capacity_kwh: 24.0,
            p_charge_max_kw: 6.0,
            p_discharge_max_kw: -6.0,
            arrival_slot: arrival,
            departure_slot: departure,
            soc_arrival: 0.5,
            soc_min: 0.2,
            soc_max: 0.9,
            soc_depart_low: 0.8,
            soc_depart_high: 0.9,
            efficiency: 0.95,
        }
    }

    fn fresh() -> SohState<f64> {
        SohState { soh_percent: 100.0, ..SohState::default() }
    }

    #[test]
    fn default_fleet_respects_ranges() {
        let fleet = sample_fleet(509, 7, &FleetDistribution::default()).unwrap();
        assert_eq!(fleet.len(), 509);
        for e in &fleet {
            assert!((15..=21).contains(&e.arrival_slot));
            assert!((30..=34).contains(&e.departure_slot));
            assert!((0.2..=0.8).contains(&e.soc_arrival));
            assert_eq!(e.capacity_kwh, 24.0);
        }
    }

    #[test]
    fn degenerate_distribution() {
        let d = FleetDistribution { arrival_std: 0.0, departure_std: 0.0, soc_std: 0.0, ..Default::default() };
        let f = sample_fleet(1, 3, &d).unwrap();
        assert_eq!(f[0].arrival_slot, 18);
        assert_eq!(f[0].departure_slot, 32);
        assert_eq!(f[0].soc_arrival, 0.5);
    }

    #[test]
    fn large_sample_mean_arrival() {
        let f = sample_fleet(10_000, 11, &FleetDistribution::default()).unwrap();
        let m = f.iter().map(|e| e.arrival_slot as f64).sum::<f64>() / f.len() as f64;
        // clipped and rounded N(18, 1) is symmetric about 18
        assert!((m - 18.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn sampling_is_reproducible_and_validated() {
        let d = FleetDistribution::default();
        assert_eq!(sample_fleet(50, 5, &d).unwrap(), sample_fleet(50, 5, &d).unwrap());
        assert_ne!(sample_fleet(50, 5, &d).unwrap(), sample_fleet(50, 6, &d).unwrap());
        let bad = FleetDistribution { soc_std: -1.0, ..Default::default() };
        assert!(sample_fleet(3, 0, &bad).is_err());
        let bad = FleetDistribution { arrival_min: 22.0, ..Default::default() };
        assert!(sample_fleet(3, 0, &bad).is_err());
    }

    #[test]
    fn partition_sizes() {
        let p = partition_evas(509, 4, 1).unwrap();
        let mut sizes: Vec<usize> = p.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![127, 127, 127, 128]);
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..509).collect::<Vec<_>>());

        assert_eq!(partition_evas(10, 1, 0).unwrap(), vec![(0..10).collect::<Vec<_>>()]);
        assert!(partition_evas(8, 4, 2).unwrap().iter().all(|g| g.len() == 2));
        assert!(partition_evas(3, 4, 0).is_err());
        assert!(partition_evas(3, 0, 0).is_err());
    }

    #[test]
    fn single_ev_bounds_while_plugged() {
        let spec = EvSpec { soc_depart_low: 0.21, soc_depart_high: 0.9, ..ev(15, 35) };
        let st = EvState { energy_kwh: 12.0, plugged: true, soh: fresh() };
        let env = build_envelope(&[(&spec, &st)], 15, 10, 1.0);
        assert_eq!(env.e_lower_kwh[0], 12.0);
        assert_eq!(env.e_upper_kwh[0], 12.0);
        // well inside the window, far from departure, bounds open up to the SOC limits
        assert!((env.e_lower_kwh[10] - 4.8).abs() < 1e-12);
        assert!((env.e_upper_kwh[10] - 21.6).abs() < 1e-12);
        assert_eq!(env.p_upper_kw[0], 6.0);
    }

    #[test]
    fn empty_and_additive_envelopes() {
        let env = build_envelope(&[], 15, 5, 1.0);
        assert!(env.e_lower_kwh.iter().chain(&env.p_upper_kw).all(|&x| x == 0.0));

        let spec = ev(16, 31);
        let st = EvState::at_arrival(&spec, fresh(), 15);
        let one = build_envelope(&[(&spec, &st)], 15, 20, 1.0);
        let two = build_envelope(&[(&spec, &st), (&spec, &st)], 15, 20, 1.0);
        for k in 0..=20 {
            assert_eq!(two.e_lower_kwh[k], 2.0 * one.e_lower_kwh[k]);
            assert_eq!(two.e_upper_kwh[k], 2.0 * one.e_upper_kwh[k]);
        }
        // unplugged before arrival: frozen energy, zero power
        assert_eq!(one.p_upper_kw[0], 0.0);
        assert_eq!(one.e_lower_kwh[1], one.e_upper_kwh[1]);
        // departure requirement at the departure instant
        assert!((one.e_lower_kwh[16] - 0.8 * 24.0).abs() < 1e-12);
    }

    #[test]
    fn admits_simple_cases() {
        let spec = EvSpec { soc_depart_low: 0.21, ..ev(15, 35) };
        let st = EvState { energy_kwh: 12.0, plugged: true, soh: fresh() };
        let env = build_envelope(&[(&spec, &st)], 15, 4, 1.0);
        assert!(envelope_admits(&env, &[12.0, 12.0, 12.0, 12.0, 12.0]));
        assert!(!envelope_admits(&env, &[12.0, 18.0]));
        assert!(envelope_admits(&env, &[12.0, 17.7]));
        assert!(!envelope_admits(&env, &[12.0, 17.7, 17.7, 23.0]));
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let fleet = sample_fleet(5, 1, &FleetDistribution::default()).unwrap();
        let mut buf = Vec::new();
        write_fleet_csv(&fleet, &mut buf).unwrap();
        assert_eq!(read_fleet_csv(buf.as_slice()).unwrap(), fleet);

        let mut empty = Vec::new();
        write_fleet_csv(&[], &mut empty).unwrap();
        let text = String::from_utf8(empty).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("id,capacity_kwh"));
        assert!(read_fleet_csv(text.as_bytes()).unwrap().is_empty());
    }
}
