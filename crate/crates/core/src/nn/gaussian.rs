use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, Mlp, MlpShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Diagonal Gaussian over actions: squashed mean plus state-independent log-std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyOut<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
}

fn half_ln_two_pi<T: Scalar>() -> T {
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// `Σ_d log N(action_d; mean_d, exp(log_std_d)²)`.
pub fn gaussian_log_prob<T: Scalar>(out: &GaussianPolicyOut<T>, action: &[T]) -> T {
    out.mean
        .iter()
        .zip(&out.log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a - m) / ls.exp();
            -T::lit(0.5) * z * z - ls - half_ln_two_pi::<T>()
        })
        .sum()
}

/// Analytic `KL(p ‖ q)` between diagonal Gaussians.
pub fn gaussian_kl<T: Scalar>(p: &GaussianPolicyOut<T>, q: &GaussianPolicyOut<T>) -> T {
    let half = T::lit(0.5);
    (0..p.mean.len())
        .map(|d| {
            let (vp, vq) = ((p.log_std[d] * T::lit(2.0)).exp(), (q.log_std[d] * T::lit(2.0)).exp());
            let dm = p.mean[d] - q.mean[d];
            q.log_std[d] - p.log_std[d] + (vp + dm * dm) / (T::lit(2.0) * vq) - half
        })
        .sum()
}

/// Policy network with a tanh-squashed mean head.
///
/// `2·sigmoid(2x) − 1` and `tanh(x)` are the same function; the mean
/// therefore lies in (−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy<T> {
    pub net: Mlp<T>,
    log_std: Vec<T>,
    pub log_std_min: T,
    pub log_std_max: T,
}

impl<T: Scalar> GaussianPolicy<T> {
    pub fn new<R: Rng + ?Sized>(shape: MlpShape, log_std_init: T, rng: &mut R) -> Self {
        let dim = shape.output_dim;
        let net = Mlp::init(shape, 0.01, rng);
        Self { net, log_std: vec![log_std_init; dim], log_std_min: T::lit(-5.0), log_std_max: T::lit(2.0) }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn log_std(&self) -> &[T] {
        &self.log_std
    }

    pub fn param_count(&self) -> usize {
        self.net.params().len() + self.log_std.len()
    }

    /// Network parameters followed by the log-std vector.
    pub fn params(&self) -> Vec<T> {
        let mut p = self.net.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    /// Set all parameters; log-std entries are clamped to the configured range.
    pub fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension { expected: self.param_count(), got: p.len() });
        }
        let n = self.net.params().len();
        self.net.set_params(&p[..n])?;
        for (ls, &v) in self.log_std.iter_mut().zip(&p[n..]) {
            *ls = v.max(self.log_std_min).min(self.log_std_max);
        }
        Ok(())
    }

    pub fn dist(&self, state: &[T]) -> Result<GaussianPolicyOut<T>> {
        let z = self.net.forward(state)?;
        Ok(GaussianPolicyOut { mean: z.iter().map(|v| v.tanh()).collect(), log_std: self.log_std.clone() })
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[T], rng: &mut R) -> Result<(Vec<T>, T)> {
        let out = self.dist(state)?;
        let action: Vec<T> = out
            .mean
            .iter()
            .zip(&out.log_std)
            .map(|(&m, &ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * T::lit(e)
            })
            .collect();
        let lp = gaussian_log_prob(&out, &action);
        Ok((action, lp))
    }

    /// Accumulate `weight · ∇θ log π(action | state)` into `grad`.
    pub fn accumulate_log_prob_grad(&self, state: &[T], action: &[T], weight: T, grad: &mut [T]) -> Result<()> {
        let cache = self.net.forward_cached(state)?;
        let n = self.net.params().len();
        let mut dz = Vec::with_capacity(self.action_dim());
        for (d, &z) in cache.output().iter().enumerate() {
            let mu = z.tanh();
            let inv_var = (-self.log_std[d] * T::lit(2.0)).exp();
            let diff = action[d] - mu;
            dz.push(diff * inv_var * (T::one() - mu * mu));
            grad[n + d] = grad[n + d] + weight * (diff * diff * inv_var - T::one());
        }
        self.net.backward(&cache, &dz, weight, &mut grad[..n])
    }

    /// Fisher (KL Hessian) operator frozen at the current parameters.
    pub fn fisher(&self, states: &[Vec<T>]) -> Result<FisherOperator<'_, T>> {
        let caches = states.iter().map(|s| self.net.forward_cached(s)).collect::<Result<Vec<_>>>()?;
        Ok(FisherOperator { policy: self, caches })
    }
}

/// `v ↦ H v` for the Hessian of the mean KL between the frozen policy and a
/// perturbed one, evaluated at zero perturbation.
pub struct FisherOperator<'a, T> {
    policy: &'a GaussianPolicy<T>,
    caches: Vec<ForwardCache<T>>,
}

impl<T: Scalar> FisherOperator<'_, T> {
    pub fn apply(&self, v: &[T], damping: T) -> Result<Vec<T>> {
        let p = self.policy;
        let n = p.net.params().len();
        if v.len() != p.param_count() {
            return Err(Error::Dimension { expected: p.param_count(), got: v.len() });
        }
        let mut out = vec![T::zero(); v.len()];
        if !self.caches.is_empty() {
            let inv_n = T::one() / T::from_usize(self.caches.len()).unwrap();
            for cache in &self.caches {
                let jv = p.net.jvp(cache, &v[..n])?;
                let u: Vec<T> = cache
                    .output()
                    .iter()
                    .zip(&jv)
                    .enumerate()
                    .map(|(d, (&z, &j))| {
                        let slope = T::one() - z.tanh() * z.tanh();
                        let inv_var = (-p.log_std[d] * T::lit(2.0)).exp();
                        slope * slope * j * inv_var
                    })
                    .collect();
                p.net.backward(cache, &u, inv_n, &mut out[..n])?;
            }
            for d in 0..p.action_dim() {
                out[n + d] = T::lit(2.0) * v[n + d];
            }
        }
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + damping * x;
        }
        Ok(out)
    }
}

/// Convenience wrapper: `H v + damping·v` at the policy's current parameters.
pub fn fisher_vector_product<T: Scalar>(
    policy: &GaussianPolicy<T>,
    states: &[Vec<T>],
    v: &[T],
    damping: T,
) -> Result<Vec<T>> {
    policy.fisher(states)?.apply(v, damping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn out(mean: &[f64], log_std: &[f64]) -> GaussianPolicyOut<f64> {
        GaussianPolicyOut { mean: mean.to_vec(), log_std: log_std.to_vec() }
    }

    #[test]
    fn log_prob_examples() {
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_log_prob(&out(&[0.3, -0.1], &[0.0, 0.0]), &[0.3, -0.1]) - 2.0 * c).abs() < 1e-15);
        let p = out(&[0.2], &[-0.7]);
        let s = (-0.7f64).exp();
        let drop = gaussian_log_prob(&p, &[0.2]) - gaussian_log_prob(&p, &[0.2 + s]);
        assert!((drop - 0.5).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let p = out(&[0.4], &[-0.5]);
        let (a, b, n) = (-8.0, 8.0, 200_000);
        let h = (b - a) / n as f64;
        // composite Simpson
        let f = |x: f64| gaussian_log_prob(&p, &[x]).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let p = out(&[0.1, 0.5], &[-0.3, 0.2]);
        assert_eq!(gaussian_kl(&p, &p), 0.0);
        assert!((gaussian_kl(&out(&[0.0], &[0.0]), &out(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
        let q = out(&[0.1, 0.5], &[0.4, 0.2]);
        assert!((gaussian_kl(&p, &q) - gaussian_kl(&q, &p)).abs() > 1e-3);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pol = GaussianPolicy::<f64>::new(MlpShape::new(2, vec![3], 1).unwrap(), -0.5, &mut rng);
        let mut p = pol.params();
        *p.last_mut().unwrap() = 9.0;
        pol.set_params(&p).unwrap();
        assert_eq!(pol.log_std(), &[2.0]);
        *p.last_mut().unwrap() = -9.0;
        pol.set_params(&p).unwrap();
        assert_eq!(pol.log_std(), &[-5.0]);
    }

    #[test]
    fn fvp_zero_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pol = GaussianPolicy::<f64>::new(MlpShape::new(3, vec![8], 2).unwrap(), -0.5, &mut rng);
        let states: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, -0.2, 0.5]).collect();
        let n = pol.param_count();
        assert!(fisher_vector_product(&pol, &states, &vec![0.0; n], 0.1).unwrap().iter().all(|&x| x == 0.0));
        let v: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let comb: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let f = pol.fisher(&states).unwrap();
        let (fv, fw, fc) = (f.apply(&v, 0.1).unwrap(), f.apply(&w, 0.1).unwrap(), f.apply(&comb, 0.1).unwrap());
        for i in 0..n {
            assert!((fc[i] - (2.0 * fv[i] - 3.0 * fw[i])).abs() < 1e-8);
        }
    }
}
