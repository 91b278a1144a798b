//! Exact advantages of small two-agent tabular CMDPs.
//!
//! Used to check the sequential decomposition of the joint advantage,
//! `A(s, a¹, a²) = A¹(s, a¹) + A²(s, a² | a¹)`, without sampling noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Two agents, factored policies, one reward or cost signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame {
    pub n_states: usize,
    pub n_a1: usize,
    pub n_a2: usize,
    /// `transition[s][a1][a2][s']`.
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    /// `signal[s][a1][a2]`.
    pub signal: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
}

/// Exact values and advantages under a fixed joint policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub v: Vec<f64>,
    pub q: Vec<Vec<Vec<f64>>>,
    /// Agent 1 alone: `Q¹(s, a¹) − V(s)`.
    pub a1: Vec<Vec<f64>>,
    /// Agent 2 after agent 1: `Q(s, a¹, a²) − Q¹(s, a¹)`.
    pub a2_given_a1: Vec<Vec<Vec<f64>>>,
    /// Joint: `Q(s, a¹, a²) − V(s)`.
    pub joint: Vec<Vec<Vec<f64>>>,
}

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

impl TabularGame {
    pub fn random(seed: u64, n_states: usize, n_a1: usize, n_a2: usize, gamma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transition = (0..n_states)
            .map(|_| (0..n_a1).map(|_| (0..n_a2).map(|_| simplex(&mut rng, n_states)).collect()).collect())
            .collect();
        let signal = (0..n_states)
            .map(|_| (0..n_a1).map(|_| (0..n_a2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        Self { n_states, n_a1, n_a2, transition, signal, gamma }
    }

    pub fn random_policy(seed: u64, n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_states).map(|_| simplex(&mut rng, n_actions)).collect()
    }

    /// Solve `(I − γ P_π) V = r_π` exactly.
    pub fn values(&self, pi1: &[Vec<f64>], pi2: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.n_states;
        let mut m = vec![vec![0.0; n + 1]; n];
        for s in 0..n {
            m[s][s] = 1.0;
            for a1 in 0..self.n_a1 {
                for a2 in 0..self.n_a2 {
                    let w = pi1[s][a1] * pi2[s][a2];
                    m[s][n] += w * self.signal[s][a1][a2];
                    for s2 in 0..n {
                        m[s][s2] -= self.gamma * w * self.transition[s][a1][a2][s2];
                    }
                }
            }
        }
        solve_augmented(m)
    }

    pub fn advantages(&self, pi1: &[Vec<f64>], pi2: &[Vec<f64>]) -> Result<Advantages> {
        let v = self.values(pi1, pi2)?;
        let q: Vec<Vec<Vec<f64>>> = (0..self.n_states)
            .map(|s| {
                (0..self.n_a1)
                    .map(|a1| {
                        (0..self.n_a2)
                            .map(|a2| {
                                let next: f64 = self.transition[s][a1][a2].iter().zip(&v).map(|(p, vv)| p * vv).sum();
                                self.signal[s][a1][a2] + self.gamma * next
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let q1: Vec<Vec<f64>> = (0..self.n_states)
            .map(|s| (0..self.n_a1).map(|a1| (0..self.n_a2).map(|a2| pi2[s][a2] * q[s][a1][a2]).sum()).collect())
            .collect();
        let a1 = (0..self.n_states).map(|s| q1[s].iter().map(|x| x - v[s]).collect()).collect();
        let a2_given_a1 = (0..self.n_states)
            .map(|s| (0..self.n_a1).map(|a1| q[s][a1].iter().map(|x| x - q1[s][a1]).collect()).collect())
            .collect();
        let joint = (0..self.n_states)
            .map(|s| q[s].iter().map(|row| row.iter().map(|x| x - v[s]).collect()).collect())
            .collect();
        Ok(Advantages { v, q, a1, a2_given_a1, joint })
    }

    /// The same game with the agents' roles swapped.
    pub fn swapped(&self) -> Self {
        let tr = |x: &Vec<Vec<f64>>| (0..self.n_a2).map(|a2| (0..self.n_a1).map(|a1| x[a1][a2]).collect()).collect();
        Self {
            n_states: self.n_states,
            n_a1: self.n_a2,
            n_a2: self.n_a1,
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_a2)
                        .map(|a2| (0..self.n_a1).map(|a1| self.transition[s][a1][a2].clone()).collect())
                        .collect()
                })
                .collect(),
            signal: self.signal.iter().map(tr).collect(),
            gamma: self.gamma,
        }
    }
}

/// Gaussian elimination with partial pivoting on an `n × (n+1)` system.
fn solve_augmented(mut m: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).expect("non-empty range");
        if m[piv][col].abs() < 1e-14 {
            return Err(Error::Numeric("singular value system".into()));
        }
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                if f != 0.0 {
                    for k in col..=n {
                        m[r][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    Ok((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_on_a_small_game() {
        let g = TabularGame::random(3, 2, 2, 2, 0.9);
        let p1 = TabularGame::random_policy(4, 2, 2);
        let p2 = TabularGame::random_policy(5, 2, 2);
        let a = g.advantages(&p1, &p2).unwrap();
        for s in 0..2 {
            for a1 in 0..2 {
                for a2 in 0..2 {
                    assert!((a.joint[s][a1][a2] - (a.a1[s][a1] + a.a2_given_a1[s][a1][a2])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn values_satisfy_bellman() {
        let g = TabularGame::random(8, 3, 2, 3, 0.95);
        let p1 = TabularGame::random_policy(1, 3, 2);
        let p2 = TabularGame::random_policy(2, 3, 3);
        let a = g.advantages(&p1, &p2).unwrap();
        for s in 0..3 {
            let mut v = 0.0;
            for a1 in 0..2 {
                for a2 in 0..3 {
                    v += p1[s][a1] * p2[s][a2] * a.q[s][a1][a2];
                }
            }
            assert!((v - a.v[s]).abs() < 1e-12);
        }
    }
}
