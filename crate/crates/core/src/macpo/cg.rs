use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};

/// Solve `H x = g` for a symmetric positive-definite operator given as a
/// closure. Stops when `‖H x − g‖ ≤ tol·‖g‖` or after `iters` iterations.
pub fn conjugate_gradient<T, F>(mut op: F, g: &[T], iters: usize, tol: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    let mut x = vec![T::zero(); g.len()];
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rr = dot(&r, &r);
    let stop = tol * tol * rr;
    for _ in 0..iters {
        if rr <= stop || rr == T::zero() {
            break;
        }
        let hp = op(&p)?;
        let php = dot(&p, &hp);
        if !php.is_finite() || php <= T::zero() {
            return Err(Error::Numeric(format!("conjugate gradient curvature {php}")));
        }
        let alpha = rr / php;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &hp, &mut r);
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(Error::Numeric("conjugate gradient residual is not finite".into()));
        }
        let beta = rr_next / rr;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
    }
    Ok(x)
}
