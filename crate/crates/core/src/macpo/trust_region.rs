//! Closed-form solution of the linearized constrained trust-region problem
//!
//! ```text
//! max gᵀx  s.t.  ½ xᵀHx ≤ δ,  c + bᵀx ≤ 0
//! ```
//!
//! through its one-constraint Lagrange dual, with the usual recovery step
//! when no point of the trust region satisfies the constraint.

use serde::{Deserialize, Serialize};

use crate::scalar::{dot, Scalar};

const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepCase {
    /// Cost gradient vanishes and the constraint holds: plain trust-region step.
    Unconstrained,
    /// Every point of the trust region satisfies the linearized constraint.
    TrustRegionFeasible,
    /// The constraint may bind; step from the dual optimum.
    Constrained,
    /// No feasible point: pure cost descent.
    Recovery,
}

impl StepCase {
    pub fn is_recovery(self) -> bool {
        self == StepCase::Recovery
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDirection<T> {
    pub direction: Vec<T>,
    pub case: StepCase,
    pub lambda: T,
    pub nu: T,
}

/// Step direction from `g`, `b`, `H⁻¹g`, `H⁻¹b`, the constraint margin
/// `c = Ĵ_C − d` and the trust radius `δ`.
pub fn cpo_direction<T: Scalar>(g: &[T], b: &[T], hinv_g: &[T], hinv_b: &[T], c: T, delta: T) -> StepDirection<T> {
    let eps = T::lit(EPS);
    let two = T::lit(2.0);
    let q = dot(g, hinv_g);
    let b_small = dot(b, b) <= eps;
    let zero = T::zero();

    let plain = |q: T| {
        let lam = (q / (two * delta)).sqrt();
        let direction = hinv_g.iter().map(|&x| x / (lam + eps)).collect();
        (direction, lam)
    };

    if b_small {
        if c < zero {
            let (direction, lambda) = plain(q);
            return StepDirection { direction, case: StepCase::Unconstrained, lambda, nu: zero };
        }
        // infeasible with no cost gradient: nothing to descend along
        return StepDirection { direction: vec![zero; g.len()], case: StepCase::Recovery, lambda: zero, nu: zero };
    }

    // the dual below is written for the descent gradient of the reward loss,
    // whose cross term with H⁻¹b has the opposite sign
    let r = -dot(g, hinv_b);
    let s = dot(b, hinv_b);
    let a_coef = q - r * r / s;
    let b_coef = two * delta - c * c / s;

    if c < zero && b_coef < zero {
        let (direction, lambda) = plain(q);
        return StepDirection { direction, case: StepCase::TrustRegionFeasible, lambda, nu: zero };
    }
    if c >= zero && b_coef < zero {
        let nu = (two * delta / (s + eps)).sqrt();
        let direction = hinv_b.iter().map(|&p| -nu * p).collect();
        return StepDirection { direction, case: StepCase::Recovery, lambda: zero, nu };
    }

    let inf = T::infinity();
    let ratio = r / c;
    let (la, lb) = if c < zero { ((zero, ratio), (ratio, inf)) } else { ((ratio, inf), (zero, ratio)) };
    let proj = |x: T, lo: T, hi: T| x.min(hi).max(lo);
    let lam_a = proj((a_coef / b_coef).sqrt(), la.0, la.1);
    let lam_b = proj((q / (two * delta)).sqrt(), lb.0, lb.1);
    let f_a = -T::lit(0.5) * (a_coef / (lam_a + eps) + b_coef * lam_a) - r * c / (s + eps);
    let f_b = -T::lit(0.5) * (q / (lam_b + eps) + two * delta * lam_b);
    let lambda = if f_a >= f_b { lam_a } else { lam_b };
    let nu = (lambda * c - r).max(zero) / (s + eps);
    let direction = hinv_g.iter().zip(hinv_b).map(|(&x, &p)| (x - nu * p) / (lambda + eps)).collect();
    StepDirection { direction, case: StepCase::Constrained, lambda, nu }
}

/// Line-search acceptance: KL inside the radius, surrogate improvement when
/// the policy is currently feasible, and a linearized cost change that does
/// not push a feasible policy past the limit (or raise an infeasible one).
pub fn line_search_accepts<T: Scalar>(kl: T, delta: T, improvement: T, linear_cost_change: T, c: T) -> bool {
    let feasible = c < T::zero();
    let cost_ok = linear_cost_change <= (-c).max(T::zero()) + T::lit(1e-12);
    kl.is_finite() && improvement.is_finite() && kl <= delta && (!feasible || improvement > T::zero()) && cost_ok
}
