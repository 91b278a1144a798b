use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Capacity-fade SOH in percent for a cycling regime with mean SOC
/// `soc_avg`, swing `delta_soc` (both fractions) after `cycles_w`
/// equivalent full cycles.
pub fn soh_evaluate<T: Scalar>(soc_avg: T, delta_soc: T, cycles_w: T) -> T {
    let a = T::lit(3.25);
    let swing = T::one() + a * delta_soc - T::lit(2.25) * delta_soc * delta_soc;
    let fade = a * soc_avg * swing * (cycles_w / T::lit(100.0)).powf(T::lit(0.453));
    T::lit(100.0) - fade
}

/// One monotone SOC excursion between two turning points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfCycle<T> {
    /// Depth of discharge in percent, in (0, 100].
    pub dod: T,
    pub avg_discharge_current: T,
    pub avg_charge_current: T,
}

/// Cycle-life parameters of the aging-factor recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SohParams<T> {
    /// Equivalent full cycle constant.
    pub cycle_constant_m1: T,
    pub cycle_life_scale: T,
    pub dod_exponent: T,
    pub discharge_current_exponent: T,
    pub charge_current_exponent: T,
    /// Half-cycles shallower than this (percent DOD) are ignored, and a
    /// preceding DOD below it disables the aging-factor drift term.
    pub dod_floor: T,
    /// Lower clamp for half-cycle average currents (A) inside the
    /// cycle-life power law.
    pub current_floor: T,
}

impl<T: Scalar> Default for SohParams<T> {
    fn default() -> Self {
        Self {
            cycle_constant_m1: T::lit(1500.0),
            cycle_life_scale: T::lit(3000.0),
            dod_exponent: T::lit(0.5),
            discharge_current_exponent: T::lit(0.2),
            charge_current_exponent: T::lit(0.2),
            dod_floor: T::one(),
            current_floor: T::lit(0.01),
        }
    }
}

impl<T: Scalar> SohParams<T> {
    pub fn is_valid(&self) -> bool {
        [
            self.cycle_constant_m1,
            self.cycle_life_scale,
            self.dod_exponent,
            self.discharge_current_exponent,
            self.charge_current_exponent,
            self.dod_floor,
            self.current_floor,
        ]
        .iter()
        .all(|v| *v > T::zero() && v.is_finite())
    }

    /// Maximum cycle count M for a half-cycle.
    pub fn max_cycles(&self, hc: &HalfCycle<T>) -> T {
        let dis = hc.avg_discharge_current.max(self.current_floor);
        let ch = hc.avg_charge_current.max(self.current_floor);
        self.cycle_life_scale
            * (hc.dod / T::lit(100.0)).powf(-self.dod_exponent)
            * dis.powf(-self.discharge_current_exponent)
            * ch.powf(-self.charge_current_exponent)
    }
}

/// Health state of one battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohState<T> {
    pub equivalent_full_cycles: T,
    pub aging_factor: T,
    pub half_cycle_history: Vec<HalfCycle<T>>,
    pub soh_percent: T,
    /// Number of recursion steps where the preceding DOD fell under the floor.
    pub ratio_guard_hits: u64,
}

impl<T: Scalar> SohState<T> {
    /// Fresh state after `cycles_w` equivalent cycles of a reference regime.
    pub fn new(cycles_w: T, aging_factor: T, ref_soc_avg: T, ref_delta_soc: T) -> Self {
        Self {
            equivalent_full_cycles: cycles_w,
            aging_factor,
            half_cycle_history: Vec::new(),
            soh_percent: soh_evaluate(ref_soc_avg, ref_delta_soc, cycles_w),
            ratio_guard_hits: 0,
        }
    }

    /// SOH as a fraction of nominal capacity.
    pub fn fraction(&self) -> T {
        self.soh_percent / T::lit(100.0)
    }

    pub fn is_valid(&self) -> bool {
        self.soh_percent > T::zero()
            && self.soh_percent <= T::lit(100.0)
            && self.equivalent_full_cycles >= T::zero()
            && self.half_cycle_history.iter().all(|h| h.dod > T::zero() && h.dod <= T::lit(100.0))
    }
}

impl Default for SohState<f64> {
    /// 50 equivalent cycles of a 0.5 mean / 0.6 swing regime (97.46 %).
    fn default() -> Self {
        Self::new(50.0, 1.1e-5, 0.5, 0.6)
    }
}

/// Split an SOC trajectory into half-cycles at its turning points.
///
/// `current_series[i]` is the current (A, positive when charging) flowing
/// between samples `i` and `i + 1`. Reversals smaller than `dod_floor`
/// percent are treated as noise, so the signed swings of the returned
/// half-cycles reconstruct `soc_end - soc_start` to within the floor.
///
/// A half-cycle is monotone, so it only carries current in one direction;
/// the opposite-direction average is borrowed from the nearest half-cycle
/// that has one.
pub fn count_half_cycles<T: Scalar>(soc_series: &[T], current_series: &[T], dod_floor: T) -> Vec<HalfCycle<T>> {
    let turns = turning_points(soc_series, dod_floor / T::lit(100.0));
    let mut out: Vec<HalfCycle<T>> = Vec::with_capacity(turns.len().saturating_sub(1));
    let mut has = Vec::with_capacity(out.capacity());
    for w in turns.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dod = (soc_series[b] - soc_series[a]).abs() * T::lit(100.0);
        let (mut dis_sum, mut dis_n, mut ch_sum, mut ch_n) = (T::zero(), 0usize, T::zero(), 0usize);
        for &i in current_series.get(a..b).unwrap_or(&[]) {
            if i > T::zero() {
                ch_sum = ch_sum + i;
                ch_n += 1;
            } else if i < T::zero() {
                dis_sum = dis_sum - i;
                dis_n += 1;
            }
        }
        let avg = |s: T, n: usize| if n == 0 { T::zero() } else { s / T::from_usize(n).unwrap() };
        out.push(HalfCycle {
            dod: dod.min(T::lit(100.0)),
            avg_discharge_current: avg(dis_sum, dis_n),
            avg_charge_current: avg(ch_sum, ch_n),
        });
        has.push((dis_n > 0, ch_n > 0));
    }
    borrow_missing(&mut out, &has);
    out
}

fn turning_points<T: Scalar>(s: &[T], thr: T) -> Vec<usize> {
    if s.is_empty() {
        return Vec::new();
    }
    let mut points = vec![0usize];
    let mut dir = 0i8;
    let mut ext = 0usize;
    for i in 1..s.len() {
        let x = s[i];
        match dir {
            0 => {
                if x - s[0] >= thr {
                    dir = 1;
                    ext = i;
                } else if s[0] - x >= thr {
                    dir = -1;
                    ext = i;
                }
            }
            1 => {
                if x >= s[ext] {
                    ext = i;
                } else if s[ext] - x >= thr {
                    points.push(ext);
                    dir = -1;
                    ext = i;
                }
            }
            _ => {
                if x <= s[ext] {
                    ext = i;
                } else if x - s[ext] >= thr {
                    points.push(ext);
                    dir = 1;
                    ext = i;
                }
            }
        }
    }
    if dir != 0 {
        points.push(ext);
    }
    points
}

fn borrow_missing<T: Scalar>(cycles: &mut [HalfCycle<T>], has: &[(bool, bool)]) {
    let n = cycles.len();
    for i in 0..n {
        let nearest = |pick: fn(&(bool, bool)) -> bool| {
            (1..n).find_map(|d| {
                let back = i.checked_sub(d).filter(|&j| pick(&has[j]));
                let fwd = Some(i + d).filter(|&j| j < n && pick(&has[j]));
                back.or(fwd)
            })
        };
        if !has[i].0 {
            if let Some(j) = nearest(|h| h.0) {
                cycles[i].avg_discharge_current = cycles[j].avg_discharge_current;
            }
        }
        if !has[i].1 {
            if let Some(j) = nearest(|h| h.1) {
                cycles[i].avg_charge_current = cycles[j].avg_charge_current;
            }
        }
    }
}

/// Advance the health state over a batch of new half-cycles.
///
/// For each half-cycle `m` the equivalent cycle count grows by
/// `ε(m-1)·M₁` and the aging factor follows
/// `ε(m) = ε(m-1) + 0.5/M(m-1) · (2 - (DOD(m-2) + DOD(m)) / DOD(m-1))`,
/// clamped at zero so `w` never decreases. The drift term needs two
/// predecessors. SOH then loses the fade that the period's regime
/// (`soc_avg`, `delta_soc`) attributes to the added cycles, so it never rises
/// and a regime change alone does not move it.
pub fn soh_advance<T: Scalar>(
    state: &SohState<T>,
    params: &SohParams<T>,
    half_cycles: &[HalfCycle<T>],
    soc_avg: T,
    delta_soc: T,
) -> SohState<T> {
    if half_cycles.is_empty() {
        return state.clone();
    }
    let mut next = state.clone();
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    for hc in half_cycles {
        if !(hc.dod >= params.dod_floor) {
            continue;
        }
        next.equivalent_full_cycles = next.equivalent_full_cycles + next.aging_factor * params.cycle_constant_m1;
        let h = &next.half_cycle_history;
        if h.len() >= 2 {
            let prev = &h[h.len() - 1];
            let prev2 = &h[h.len() - 2];
            let ratio = if prev.dod < params.dod_floor {
                next.ratio_guard_hits += 1;
                two
            } else {
                (prev2.dod + hc.dod) / prev.dod
            };
            let drift = half / params.max_cycles(prev) * (two - ratio);
            next.aging_factor = (next.aging_factor + drift).max(T::zero());
        }
        next.half_cycle_history.push(*hc);
    }
    let fade = soh_evaluate(soc_avg, delta_soc, state.equivalent_full_cycles)
        - soh_evaluate(soc_avg, delta_soc, next.equivalent_full_cycles);
    next.soh_percent = next.soh_percent - fade.max(T::zero());
    next
}
