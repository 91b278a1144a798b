use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Piecewise-linear open-circuit voltage as a function of SOC (cell level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvCurve<T> {
    breakpoints: Vec<(T, T)>,
}

impl<T: Scalar> OcvCurve<T> {
    pub fn new(breakpoints: Vec<(T, T)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::Config("OCV curve needs at least two breakpoints".into()));
        }
        if breakpoints[0].0 != T::zero() || breakpoints[breakpoints.len() - 1].0 != T::one() {
            return Err(Error::Config("OCV curve must span SOC 0..=1".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("OCV SOC breakpoints must strictly increase".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Config("OCV voltage must be non-decreasing".into()));
            }
        }
        if breakpoints.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
            return Err(Error::Config("OCV curve contains non-finite values".into()));
        }
        Ok(Self { breakpoints })
    }

    /// LFP-like default: 2.8 V empty, 3.3 V plateau, 3.6 V full.
    pub fn lfp_default() -> Self {
        let v = [2.80, 3.10, 3.20, 3.25, 3.30, 3.30, 3.30, 3.30, 3.33, 3.38, 3.60];
        let pts = v.iter().enumerate().map(|(i, &u)| (T::lit(i as f64 / 10.0), T::lit(u))).collect();
        Self::new(pts).expect("default OCV curve is valid")
    }

    pub fn breakpoints(&self) -> &[(T, T)] {
        &self.breakpoints
    }

    fn segment(&self, soc: T) -> usize {
        let n = self.breakpoints.len();
        // right-continuous: a breakpoint belongs to the segment on its right
        let mut i = 0;
        while i + 2 < n && soc >= self.breakpoints[i + 1].0 {
            i += 1;
        }
        i
    }

    pub fn voltage(&self, soc: T) -> T {
        let soc = soc.max(T::zero()).min(T::one());
        let i = self.segment(soc);
        let (s0, v0) = self.breakpoints[i];
        let (s1, v1) = self.breakpoints[i + 1];
        v0 + (v1 - v0) * (soc - s0) / (s1 - s0)
    }

    /// dU_oc/dSOC of the segment containing `soc` (right segment at a breakpoint).
    pub fn slope(&self, soc: T) -> T {
        let soc = soc.max(T::zero()).min(T::one());
        let i = self.segment(soc);
        let (s0, v0) = self.breakpoints[i];
        let (s1, v1) = self.breakpoints[i + 1];
        (v1 - v0) / (s1 - s0)
    }
}

impl<T: Scalar> Default for OcvCurve<T> {
    fn default() -> Self {
        Self::lfp_default()
    }
}
