//! Exogenous day profiles, net load, load variance and the stakeholder cost terms.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::battery::SohState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SLOTS_PER_DAY: usize = 24;

/// One day of hourly profiles, indexed by hour of day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDay {
    pub base_load_kw: Vec<f64>,
    pub pv_kw: Vec<f64>,
    pub wind_kw: Vec<f64>,
    /// Currency per kWh.
    pub tariff: Vec<f64>,
    pub transformer_kva: f64,
    pub power_factor: f64,
    pub tie_line_min_kw: f64,
    /// α, currency per kW².
    pub fluctuation_coeff: f64,
    /// ψ.
    pub mean_net_load_coeff: f64,
}

/// Shape of the built-in synthetic day. Load and generation are per
/// household and scaled by the household count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub households: f64,
    pub base_mean_kw: f64,
    pub base_daily_amplitude_kw: f64,
    pub base_peak_hour: f64,
    pub base_twice_daily_amplitude_kw: f64,
    pub pv_peak_kw: f64,
    pub pv_sunrise_hour: f64,
    pub pv_sunset_hour: f64,
    pub wind_mean_kw: f64,
    pub wind_amplitude_kw: f64,
    /// Relative multiplicative noise on base, PV and wind.
    pub noise_std: f64,
    pub tariff_peak: f64,
    pub tariff_valley: f64,
    pub peak_start_hour: usize,
    pub peak_end_hour: usize,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            households: 509.0,
            base_mean_kw: 2.4,
            base_daily_amplitude_kw: 1.0,
            base_peak_hour: 19.0,
            base_twice_daily_amplitude_kw: 0.3,
            pv_peak_kw: 0.6,
            pv_sunrise_hour: 6.0,
            pv_sunset_hour: 18.0,
            wind_mean_kw: 0.3,
            wind_amplitude_kw: 0.1,
            noise_std: 0.03,
            tariff_peak: 0.25,
            tariff_valley: 0.10,
            peak_start_hour: 8,
            peak_end_hour: 22,
            seed: 2024,
        }
    }
}

impl GridDay {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_kw", &self.base_load_kw),
            ("pv_kw", &self.pv_kw),
            ("wind_kw", &self.wind_kw),
            ("tariff", &self.tariff),
        ] {
            if v.len() != SLOTS_PER_DAY {
                return Err(Error::Config(format!("{name} needs {SLOTS_PER_DAY} slots, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        if self.pv_kw.iter().chain(&self.wind_kw).any(|x| *x < 0.0) {
            return Err(Error::Config("renewable output must be ≥ 0".into()));
        }
        if !(self.fluctuation_coeff > 0.0) || !(self.transformer_kva > 0.0) {
            return Err(Error::Config("fluctuation coefficient and transformer rating must be > 0".into()));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(Error::Config("power factor must lie in (0, 1]".into()));
        }
        if !(self.tie_line_min_kw < self.tie_line_max_kw()) || !self.mean_net_load_coeff.is_finite() {
            return Err(Error::Config("tie-line bounds are inconsistent".into()));
        }
        Ok(())
    }

    pub fn tie_line_max_kw(&self) -> f64 {
        self.transformer_kva * self.power_factor
    }

    /// Base load minus renewables.
    pub fn uncontrolled_load(&self) -> Vec<f64> {
        (0..SLOTS_PER_DAY).map(|k| self.base_load_kw[k] - self.pv_kw[k] - self.wind_kw[k]).collect()
    }

    /// Net renewable-adjusted load `P_load = -pv - wind + p_eva`.
    pub fn net_load(&self, p_eva_kw: &[f64]) -> Vec<f64> {
        (0..SLOTS_PER_DAY).map(|k| -self.pv_kw[k] - self.wind_kw[k] + p_eva_kw[k]).collect()
    }

    /// Synthetic day: sinusoidal base load with an evening peak, a
    /// half-sine PV bell, slowly varying wind, seeded multiplicative noise
    /// and a two-level time-of-use tariff.
    pub fn synthetic(profile: &SyntheticProfile) -> Result<Self> {
        if !(profile.noise_std >= 0.0) || !profile.noise_std.is_finite() || !(profile.households >= 0.0) {
            return Err(Error::Config("synthetic profile noise and household count must be ≥ 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        let noise = Normal::new(0.0, profile.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut jitter = || (1.0 + noise.sample(&mut rng)).max(0.0);
        let tau = std::f64::consts::TAU;
        let n = profile.households;
        let mut day = GridDay {
            base_load_kw: Vec::with_capacity(SLOTS_PER_DAY),
            pv_kw: Vec::with_capacity(SLOTS_PER_DAY),
            wind_kw: Vec::with_capacity(SLOTS_PER_DAY),
            tariff: Vec::with_capacity(SLOTS_PER_DAY),
            ..GridDay::default()
        };
        for h in 0..SLOTS_PER_DAY {
            let t = h as f64;
            let base = profile.base_mean_kw
                + profile.base_daily_amplitude_kw * (tau * (t - profile.base_peak_hour) / 24.0).cos()
                + profile.base_twice_daily_amplitude_kw * (2.0 * tau * (t - profile.base_peak_hour) / 24.0).cos();
            day.base_load_kw.push(n * base.max(0.0) * jitter());
            let (rise, set) = (profile.pv_sunrise_hour, profile.pv_sunset_hour);
            let pv = if t > rise && t < set {
                profile.pv_peak_kw * (std::f64::consts::PI * (t - rise) / (set - rise)).sin()
            } else {
                0.0
            };
            day.pv_kw.push(n * pv * jitter());
            let wind = profile.wind_mean_kw + profile.wind_amplitude_kw * (tau * (t - 3.0) / 24.0).cos();
            day.wind_kw.push(n * wind.max(0.0) * jitter());
            let peak = h >= profile.peak_start_hour && h < profile.peak_end_hour;
            day.tariff.push(if peak { profile.tariff_peak } else { profile.tariff_valley });
        }
        day.validate()?;
        Ok(day)
    }
}

impl Default for GridDay {
    /// All-zero profiles with the default grid constants.
    fn default() -> Self {
        Self {
            base_load_kw: vec![0.0; SLOTS_PER_DAY],
            pv_kw: vec![0.0; SLOTS_PER_DAY],
            wind_kw: vec![0.0; SLOTS_PER_DAY],
            tariff: vec![0.0; SLOTS_PER_DAY],
            transformer_kva: 4000.0,
            power_factor: 0.8,
            tie_line_min_kw: 0.0,
            fluctuation_coeff: 0.01,
            mean_net_load_coeff: 0.1,
        }
    }
}

/// `P = base - pv - wind + p_eva`, element-wise.
pub fn power_load<T: Scalar>(base: &[T], pv: &[T], wind: &[T], p_eva: &[T]) -> Vec<T> {
    base.iter().zip(pv).zip(wind).zip(p_eva).map(|(((&b, &s), &w), &e)| b - s - w + e).collect()
}

/// Population variance of a load profile.
pub fn load_variance<T: Scalar>(p_total: &[T]) -> T {
    if p_total.is_empty() {
        return T::zero();
    }
    let n = T::from_usize(p_total.len()).unwrap();
    let mean = p_total.iter().copied().sum::<T>() / n;
    p_total.iter().map(|&p| (p - mean) * (p - mean)).sum::<T>() / n
}

/// `α·σ²(p_total) + ψ·mean(p_net_load)`.
pub fn cost_f1<T: Scalar>(alpha: T, psi: T, p_total: &[T], p_net_load: &[T]) -> T {
    let mean = if p_net_load.is_empty() {
        T::zero()
    } else {
        p_net_load.iter().copied().sum::<T>() / T::from_usize(p_net_load.len()).unwrap()
    };
    alpha * load_variance(p_total) + psi * mean
}

/// Energy purchase cost `Σ c·P·dt`; negative when discharge revenue dominates.
pub fn cost_f2<T: Scalar>(tariff: &[T], p_eva_kw: &[T], dt: T) -> T {
    tariff.iter().zip(p_eva_kw).map(|(&c, &p)| c * p * dt).sum()
}

/// Battery replacement cost constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationPrice<T> {
    /// Currency per kWh of capacity.
    pub c_bat: T,
    pub c_labor: T,
    /// End-of-life SOH fraction.
    pub soh_eol: T,
}

impl<T: Scalar> Default for DegradationPrice<T> {
    fn default() -> Self {
        Self { c_bat: T::lit(300.0), c_labor: T::lit(240.0), soh_eol: T::lit(0.8) }
    }
}

impl<T: Scalar> DegradationPrice<T> {
    /// Cost of losing one unit of SOH fraction on one kWh of nominal capacity.
    pub fn per_kwh(&self) -> T {
        self.c_bat + self.c_labor / (T::one() - self.soh_eol)
    }
}

/// `Σ (c_bat + c_labor/(1-soh_eol))·(1-SOH)·Q` over `(state, nominal capacity)` pairs.
pub fn cost_f3<T: Scalar>(fleet_soh: &[(&SohState<T>, T)], price: &DegradationPrice<T>) -> T {
    let k = price.per_kwh();
    fleet_soh.iter().map(|(s, q)| k * (T::one() - s.fraction()) * *q).sum()
}

/// One-day DSO cost decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub f1_grid: f64,
    pub f2_charging: f64,
    pub f3_degradation: f64,
    pub load_variance: f64,
    pub mean_net_load: f64,
    pub fluctuation: f64,
    pub dso_total: f64,
}

/// Split a day into charging, degradation and fluctuation lines.
///
/// The degradation line is the F₃ cost accrued between `soh_before` and
/// `soh_after`; with pristine `soh_before` it is F₃ of `soh_after` itself.
pub fn dso_decomposition(
    day: &GridDay,
    p_eva_kw: &[f64],
    soh_before: &[(&SohState<f64>, f64)],
    soh_after: &[(&SohState<f64>, f64)],
    price: &DegradationPrice<f64>,
    dt: f64,
) -> CostBreakdown {
    let p_total = power_load(&day.base_load_kw, &day.pv_kw, &day.wind_kw, p_eva_kw);
    let net = day.net_load(p_eva_kw);
    let variance = load_variance(&p_total);
    let mean_net_load = net.iter().sum::<f64>() / net.len().max(1) as f64;
    let f2 = cost_f2(&day.tariff, p_eva_kw, dt);
    let f3 = cost_f3(soh_after, price) - cost_f3(soh_before, price);
    let fluctuation = day.fluctuation_coeff * variance;
    CostBreakdown {
        f1_grid: cost_f1(day.fluctuation_coeff, day.mean_net_load_coeff, &p_total, &net),
        f2_charging: f2,
        f3_degradation: f3,
        load_variance: variance,
        mean_net_load,
        fluctuation,
        dso_total: f2 + f3 + fluctuation,
    }
}

/// Per-slot tie-line check `tie_line_min ≤ P ≤ S·cosφ`, inclusive.
pub fn check_grid_constraints(day: &GridDay, p_total: &[f64]) -> Vec<bool> {
    let hi = day.tie_line_max_kw();
    p_total.iter().map(|&p| p >= day.tie_line_min_kw && p <= hi).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    slot: usize,
    base_kw: f64,
    pv_kw: f64,
    wind_kw: f64,
    tariff: f64,
}

const PROFILE_HEADER: [&str; 5] = ["slot", "base_kw", "pv_kw", "wind_kw", "tariff"];

/// Read the four profiles into `template`, keeping its grid constants.
pub fn read_profile_csv<R: Read>(input: R, template: &GridDay) -> Result<GridDay> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(PROFILE_HEADER.iter().copied()) {
        return Err(Error::Config(format!("profile CSV header must be {}", PROFILE_HEADER.join(","))));
    }
    let mut day = GridDay { base_load_kw: vec![], pv_kw: vec![], wind_kw: vec![], tariff: vec![], ..template.clone() };
    for (i, rec) in r.deserialize().enumerate() {
        let row: ProfileRow = rec.map_err(|e| Error::Config(format!("profile row {}: {e}", i + 1)))?;
        if row.slot != i {
            return Err(Error::Config(format!("profile row {} has slot {}", i + 1, row.slot)));
        }
        day.base_load_kw.push(row.base_kw);
        day.pv_kw.push(row.pv_kw);
        day.wind_kw.push(row.wind_kw);
        day.tariff.push(row.tariff);
    }
    day.validate()?;
    Ok(day)
}

pub fn write_profile_csv<W: Write>(day: &GridDay, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for k in 0..day.base_load_kw.len() {
        w.serialize(ProfileRow {
            slot: k,
            base_kw: day.base_load_kw[k],
            pv_kw: day.pv_kw[k],
            wind_kw: day.wind_kw[k],
            tariff: day.tariff[k],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_profile(path: &Path, template: &GridDay) -> Result<GridDay> {
    read_profile_csv(std::fs::File::open(path)?, template)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_load_examples() {
        assert_eq!(power_load(&[1000.0], &[200.0], &[100.0], &[50.0]), vec![750.0]);
        assert_eq!(power_load(&[5.0, 7.0], &[0.0; 2], &[0.0; 2], &[0.0; 2]), vec![5.0, 7.0]);
        let p = power_load(&[900.0, 800.0], &[100.0, 0.0], &[0.0, 50.0], &[-800.0, -750.0]);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(load_variance(&[3.0; 24]), 0.0);
        assert_eq!(load_variance(&[0.0, 2.0]), 1.0);
        let p: Vec<f64> = (0..24).map(|k| (k as f64 * 0.7).sin() * 100.0).collect();
        let shifted: Vec<f64> = p.iter().map(|x| x + 1234.5).collect();
        let scaled: Vec<f64> = p.iter().map(|x| 3.0 * x).collect();
        assert!((load_variance(&p) - load_variance(&shifted)).abs() < 1e-8);
        assert!((load_variance(&scaled) - 9.0 * load_variance(&p)).abs() < 1e-8);
    }

    #[test]
    fn f1_examples() {
        // [0, 20] has variance 100
        assert!((cost_f1(0.01_f64, 0.0, &[0.0, 20.0], &[0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cost_f1(0.01, 0.1, &[0.0; 24], &[0.0; 24]), 0.0);
        let total = [0.0, 20.0];
        assert!((cost_f1(0.01_f64, 1.0, &total, &[-500.0, -500.0]) - (1.0 - 500.0)).abs() < 1e-12);
    }

    #[test]
    fn f2_examples() {
        assert!((cost_f2(&[0.1_f64; 24], &[10.0; 24], 1.0) - 24.0).abs() < 1e-12);
        assert_eq!(cost_f2(&[0.1; 24], &[0.0; 24], 1.0), 0.0);
        let p: Vec<f64> = (0..24).map(|k| k as f64 - 11.0).collect();
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        let c: Vec<f64> = (0..24).map(|k| 0.1 + 0.01 * k as f64).collect();
        assert_eq!(cost_f2(&c, &p, 1.0), -cost_f2(&c, &neg, 1.0));
    }

    #[test]
    fn f3_examples() {
        let price = DegradationPrice::default();
        let new = SohState { soh_percent: 100.0, ..SohState::default() };
        assert_eq!(cost_f3(&[(&new, 24.0)], &price), 0.0);
        let worn = SohState { soh_percent: 99.0, ..SohState::default() };
        assert!((cost_f3(&[(&worn, 24.0)], &price) - 360.0).abs() < 1e-9);
    }

    #[test]
    fn published_decomposition_arithmetic() {
        let (charging, degradation, fluctuation) = (1294.6_f64, 333.8, 626.9);
        assert!((charging + degradation + fluctuation - 2255.3).abs() < 1e-9);
        // the table rounds to one decimal
        assert!((0.01 * 62693.3_f64 - fluctuation).abs() <= 0.05);
    }

    #[test]
    fn decomposition_identity() {
        let day = GridDay::synthetic(&SyntheticProfile::default()).unwrap();
        let p: Vec<f64> = (0..24).map(|k| ((k * 37) % 11) as f64 * 40.0 - 200.0).collect();
        let a = SohState::default();
        let b = SohState { soh_percent: 97.3, ..SohState::default() };
        let d = dso_decomposition(&day, &p, &[(&a, 24.0)], &[(&b, 24.0)], &DegradationPrice::default(), 1.0);
        assert_eq!(d.dso_total, d.f2_charging + d.f3_degradation + d.fluctuation);
        assert!(d.f3_degradation > 0.0);

        let zero = GridDay { fluctuation_coeff: 0.01, ..GridDay::default() };
        let z = dso_decomposition(&zero, &[0.0; 24], &[], &[], &DegradationPrice::default(), 1.0);
        assert_eq!((z.dso_total, z.f1_grid, z.load_variance), (0.0, 0.0, 0.0));
    }

    #[test]
    fn grid_bounds_inclusive() {
        let day = GridDay::default();
        assert_eq!(day.tie_line_max_kw(), 3200.0);
        assert_eq!(check_grid_constraints(&day, &[3200.0, 3201.0, 0.0, -1.0]), vec![true, false, true, false]);
    }

    #[test]
    fn profile_csv_round_trip_and_strictness() {
        let day = GridDay::synthetic(&SyntheticProfile::default()).unwrap();
        let mut buf = Vec::new();
        write_profile_csv(&day, &mut buf).unwrap();
        assert_eq!(read_profile_csv(buf.as_slice(), &GridDay::default()).unwrap(), day);

        let text = String::from_utf8(buf).unwrap();
        let short: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(read_profile_csv(short.as_bytes(), &GridDay::default()).is_err());
        let nan = text.replacen(",0.1\n", ",NaN\n", 1);
        assert!(read_profile_csv(nan.as_bytes(), &GridDay::default()).is_err());
        let missing = text.replacen(",0.1\n", ",\n", 1);
        assert!(read_profile_csv(missing.as_bytes(), &GridDay::default()).is_err());
    }

    #[test]
    fn synthetic_day_shape() {
        let day = GridDay::synthetic(&SyntheticProfile::default()).unwrap();
        let load = day.uncontrolled_load();
        let peak = (0..24).max_by(|&a, &b| load[a].total_cmp(&load[b])).unwrap();
        assert!((17..=21).contains(&peak), "peak hour {peak}");
        assert!(day.pv_kw[0] == 0.0 && day.pv_kw[12] > 0.0);
        assert_eq!(day.tariff[3], 0.10);
        assert_eq!(day.tariff[12], 0.25);
    }
}
