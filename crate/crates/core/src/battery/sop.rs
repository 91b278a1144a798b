use serde::{Deserialize, Serialize};

use super::OcvCurve;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Series/parallel cell array of one vehicle.
///
/// Currents returned by the SOP functions are per parallel branch, i.e. the
/// current each series string (and therefore each cell) carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPack<T> {
    pub series_count: u32,
    pub parallel_count: u32,
    pub cell_nominal_voltage: T,
    /// Ah per cell, which is also the capacity of one branch.
    pub cell_capacity: T,
    pub internal_resistance: T,
    /// Per-branch design limits (A).
    pub design_current_charge_max: T,
    pub design_current_discharge_max: T,
    /// Maps pack-level power/energy to vehicle level.
    pub capacity_scale: T,
}

impl<T: Scalar> CellPack<T> {
    /// 39s4p array of 3.3 V / 2.3 Ah cells, scaled to a 24 kWh vehicle.
    pub fn default_vehicle() -> Self {
        let mut pack = Self {
            series_count: 39,
            parallel_count: 4,
            cell_nominal_voltage: T::lit(3.3),
            cell_capacity: T::lit(2.3),
            internal_resistance: T::lit(0.01),
            design_current_charge_max: T::lit(6.9),
            design_current_discharge_max: T::lit(6.9),
            capacity_scale: T::one(),
        };
        pack.capacity_scale = T::lit(24_000.0) / pack.nominal_energy_wh();
        pack
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.cell_nominal_voltage,
            self.cell_capacity,
            self.internal_resistance,
            self.design_current_charge_max,
            self.design_current_discharge_max,
            self.capacity_scale,
        ];
        if self.series_count == 0 || self.parallel_count == 0 {
            return Err(Error::Config("cell pack needs at least one cell in series and in parallel".into()));
        }
        if positive.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::Config("cell pack electrical quantities must be positive".into()));
        }
        Ok(())
    }

    /// Pack nominal energy before `capacity_scale`.
    pub fn nominal_energy_wh(&self) -> T {
        T::from_u32(self.series_count * self.parallel_count).unwrap() * self.cell_nominal_voltage * self.cell_capacity
    }

    /// Branch (cell) current in amperes for a vehicle-level power in kW.
    pub fn branch_current(&self, power_kw: T) -> T {
        let watts_per_branch_amp = T::from_u32(self.series_count * self.parallel_count).unwrap()
            * self.cell_nominal_voltage
            * self.capacity_scale;
        power_kw * T::lit(1000.0) / watts_per_branch_amp
    }
}

/// Operating window for state-of-power evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SopWindow<T> {
    pub soc_min: T,
    pub soc_max: T,
    /// Number of slots the peak current must be sustained for.
    pub horizon_slots: u32,
    pub slot_hours: T,
    /// Cell terminal voltage limits.
    pub u_min: T,
    pub u_max: T,
}

impl<T: Scalar> Default for SopWindow<T> {
    fn default() -> Self {
        Self {
            soc_min: T::lit(0.2),
            soc_max: T::lit(0.9),
            horizon_slots: 1,
            slot_hours: T::one(),
            u_min: T::lit(2.5),
            u_max: T::lit(3.65),
        }
    }
}

/// Peak per-branch (charge, discharge) currents in amperes, both ≥ 0.
///
/// Each is the minimum of an SOC-headroom limit, a terminal-voltage limit
/// and the design limit.
pub fn sop_current_limits<T: Scalar>(pack: &CellPack<T>, ocv: &OcvCurve<T>, soc: T, window: &SopWindow<T>) -> (T, T) {
    let zero = T::zero();
    let q = pack.cell_capacity;
    let span = T::from_u32(window.horizon_slots.max(1)).unwrap() * window.slot_hours;

    let i_soc_dis = (q * (soc - window.soc_min) / span).max(zero);
    let i_soc_ch = (q * (window.soc_max - soc) / span).max(zero);

    let u_oc = ocv.voltage(soc);
    let denom = pack.internal_resistance + span / q * ocv.slope(soc);
    let i_volt_dis = ((u_oc - window.u_min) / denom).max(zero);
    let i_volt_ch = ((u_oc - window.u_max) / denom).abs();

    let ch = i_soc_ch.min(i_volt_ch).min(pack.design_current_charge_max);
    let dis = i_soc_dis.min(i_volt_dis).min(pack.design_current_discharge_max);
    (ch, dis)
}

/// Vehicle-level (charge ≥ 0, discharge ≤ 0) power limits in kW.
///
/// Terminal voltage is taken as the open-circuit voltage at `soc`.
pub fn sop_power_limits<T: Scalar>(pack: &CellPack<T>, ocv: &OcvCurve<T>, soc: T, window: &SopWindow<T>) -> (T, T) {
    let (i_ch, i_dis) = sop_current_limits(pack, ocv, soc, window);
    let volts_per_branch_amp =
        ocv.voltage(soc) * T::from_u32(pack.series_count * pack.parallel_count).unwrap() * pack.capacity_scale
            / T::lit(1000.0);
    (i_ch * volts_per_branch_amp, -(i_dis * volts_per_branch_amp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_curve(v: f64) -> OcvCurve<f64> {
        OcvCurve::new(vec![(0.0, v), (1.0, v)]).unwrap()
    }

    fn wide_pack(cell_capacity: f64, parallel: u32) -> CellPack<f64> {
        CellPack {
            series_count: 39,
            parallel_count: parallel,
            cell_nominal_voltage: 3.3,
            cell_capacity,
            internal_resistance: 0.01,
            design_current_charge_max: 1e6,
            design_current_discharge_max: 1e6,
            capacity_scale: 1.0,
        }
    }

    fn wide_window() -> SopWindow<f64> {
        SopWindow { soc_min: 0.2, soc_max: 0.9, horizon_slots: 1, slot_hours: 1.0, u_min: 0.0, u_max: 100.0 }
    }

    #[test]
    fn soc_limit_binds() {
        let (_, dis) = sop_current_limits(&wide_pack(9.2, 1), &flat_curve(3.3), 0.5, &wide_window());
        assert!((dis - 2.76).abs() < 1e-12);
    }

    #[test]
    fn zero_headroom_at_bounds() {
        let w = wide_window();
        let (ch, _) = sop_current_limits(&wide_pack(9.2, 1), &flat_curve(3.3), 0.9, &w);
        assert_eq!(ch, 0.0);
        let (_, pdis) = sop_power_limits(&wide_pack(9.2, 1), &flat_curve(3.3), 0.2, &w);
        assert_eq!(pdis, 0.0);
    }

    #[test]
    fn voltage_limit_on_flat_segment() {
        let w = SopWindow { u_min: 2.8, u_max: 100.0, soc_min: 0.0, soc_max: 1.0, ..wide_window() };
        let (_, dis) = sop_current_limits(&wide_pack(1000.0, 1), &flat_curve(3.3), 0.5, &w);
        assert!((dis - 50.0).abs() < 1e-9);
    }

    #[test]
    fn power_is_branch_current_times_pack_voltage() {
        let (_, pdis) = sop_power_limits(&wide_pack(9.2, 4), &flat_curve(3.3), 0.5, &wide_window());
        let expected = 39.0 * 3.3 * 4.0 * 2.76 / 1000.0;
        assert!((pdis + expected).abs() < 1e-12);
        assert!((expected * 1000.0 - 1420.848).abs() < 1e-6);
    }

    #[test]
    fn design_limit_branch() {
        let mut pack = wide_pack(1000.0, 4);
        pack.design_current_discharge_max = 6.9;
        pack.design_current_charge_max = 6.9;
        let w = SopWindow { soc_min: 0.0, soc_max: 1.0, ..wide_window() };
        let (pch, pdis) = sop_power_limits(&pack, &flat_curve(3.3), 0.5, &w);
        let u_pack = 39.0 * 3.3;
        assert!((pch - u_pack * 4.0 * 6.9 / 1000.0).abs() < 1e-12);
        assert!((pdis + u_pack * 4.0 * 6.9 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn default_vehicle_scale() {
        let pack = CellPack::<f64>::default_vehicle();
        pack.validate().unwrap();
        assert!((pack.nominal_energy_wh() * pack.capacity_scale - 24_000.0).abs() < 1e-9);
        assert!((pack.capacity_scale - 20.27).abs() < 0.01);
        // 6 kW on a 24 kWh vehicle is 0.25 C at cell level
        assert!((pack.branch_current(6.0) / pack.cell_capacity - 0.25).abs() < 1e-12);
    }

    #[test]
    fn default_vehicle_can_always_reach_departure_target() {
        // the charge limit never drops below what an 0.8 departure target can demand in one slot
        let pack = CellPack::<f64>::default_vehicle();
        let ocv = OcvCurve::lfp_default();
        let w = SopWindow::default();
        let q_eff = 24.0 * 0.9746;
        for i in 0..=600 {
            let soc = 0.2 + i as f64 / 1000.0;
            let (pch, _) = sop_power_limits(&pack, &ocv, soc, &w);
            let demand = (6.0_f64).min((0.8 - soc) * q_eff / 0.95);
            assert!(pch >= demand - 1e-9, "soc {soc}: {pch} < {demand}");
        }
    }

    #[test]
    fn one_slot_at_soc_limit_lands_in_window() {
        // SOC-only pack: huge voltage window, huge design limits
        let pack = wide_pack(2.3, 4);
        let w = wide_window();
        let ocv = flat_curve(3.3);
        for i in 0..=70 {
            let soc = 0.2 + i as f64 * 0.01;
            let (ch, dis) = sop_current_limits(&pack, &ocv, soc, &w);
            let up = soc + ch * w.slot_hours / pack.cell_capacity;
            let down = soc - dis * w.slot_hours / pack.cell_capacity;
            assert!(up <= w.soc_max + 1e-9 && up >= w.soc_min - 1e-9);
            assert!(down >= w.soc_min - 1e-9 && down <= w.soc_max + 1e-9);
        }
    }
}
