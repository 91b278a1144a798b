//! Analytic battery conditioning models: SOC bookkeeping, state-of-power
//! limits and cycle-driven state-of-health fade.

mod ocv;
mod soh;
mod sop;

pub use ocv::OcvCurve;
pub use soh::{count_half_cycles, soh_advance, soh_evaluate, HalfCycle, SohParams, SohState};
pub use sop::{sop_current_limits, sop_power_limits, CellPack, SopWindow};

use crate::scalar::Scalar;

/// Energy after one slot at constant power with a single round-trip
/// efficiency applied in both directions.
#[inline]
pub fn soc_step<T: Scalar>(energy_kwh: T, power_kw: T, efficiency: T, dt_hours: T) -> T {
    energy_kwh + efficiency * power_kw * dt_hours
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soc_step_examples() {
        assert!((soc_step(12.0, 6.0, 0.95, 1.0) - 17.7_f64).abs() < 1e-12);
        assert_eq!(soc_step(12.0, 0.0, 0.95, 1.0), 12.0_f64);
        assert!((soc_step(17.7, -6.0, 0.95, 1.0) - 12.0_f64).abs() < 1e-12);
        assert!((soc_step(12.0_f32, 6.0, 0.95, 1.0) - 17.7).abs() < 1e-5);
    }
}
