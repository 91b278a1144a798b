use crate::scalar::Scalar;

/// Generalized advantage estimates by backward recursion.
///
/// `values` has one more entry than `rewards`; the last one is the
/// bootstrap value of the state after the final step (0 when terminal).
pub fn compute_gae<T: Scalar>(rewards: &[T], values: &[T], gamma: T, lambda: T) -> Vec<T> {
    assert_eq!(values.len(), rewards.len() + 1, "values need a bootstrap entry");
    let mut adv = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// `Σ_t γ^t x_t`.
pub fn discounted_sum<T: Scalar>(xs: &[T], gamma: T) -> T {
    xs.iter().rev().fold(T::zero(), |acc, &x| x + gamma * acc)
}

/// Monte-Carlo mean of the discounted cost over episodes.
pub fn estimate_cost_return<T: Scalar>(episodes: &[Vec<T>], gamma: T) -> T {
    if episodes.is_empty() {
        return T::zero();
    }
    let total: T = episodes.iter().map(|c| discounted_sum(c, gamma)).sum();
    total / T::from_usize(episodes.len()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_and_td_residuals() {
        let a = compute_gae::<f64>(&[1.0], &[0.5, 2.0], 0.9, 0.95);
        assert!((a[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-15);
        let r = [1.0f64, -0.5, 2.0];
        let v = [0.1, 0.2, 0.3, 0.0];
        let a = compute_gae(&r, &v, 0.9, 0.0);
        for t in 0..3 {
            assert!((a[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_limit() {
        let r = [1.0f64, 2.0, 3.0];
        let v = [0.5, 0.7, 0.1, 0.0];
        let a = compute_gae(&r, &v, 1.0, 1.0);
        assert!((a[0] - (6.0 - 0.5)).abs() < 1e-12);
        assert!((a[2] - (3.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn cost_return_examples() {
        assert_eq!(estimate_cost_return(&[vec![0.0; 5]], 0.99), 0.0);
        assert_eq!(estimate_cost_return(&[vec![1.0, 0.0, 0.0]], 0.99), 1.0);
        assert!((estimate_cost_return(&[vec![1.0; 3]], 0.5) - 1.75_f64).abs() < 1e-15);
        assert!((estimate_cost_return(&[vec![1.0; 3], vec![0.0; 3]], 0.5) - 0.875_f64).abs() < 1e-15);
    }
}
