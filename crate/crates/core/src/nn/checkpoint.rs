use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gaussian::GaussianPolicy;
use super::mlp::{Mlp, MlpShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable dump of one network and its optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub shape: MlpShape,
    pub params: Vec<f64>,
    /// Present for policies.
    pub log_std: Option<Vec<f64>>,
    pub adam: Option<Adam<f64>>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn adam_to_f64<T: Scalar>(a: &Adam<T>) -> Adam<f64> {
    Adam {
        lr: a.lr.to_f64_lossy(),
        beta1: a.beta1.to_f64_lossy(),
        beta2: a.beta2.to_f64_lossy(),
        eps: a.eps.to_f64_lossy(),
        m: to_f64(&a.m),
        v: to_f64(&a.v),
        t: a.t,
    }
}

fn adam_from_f64<T: Scalar>(a: &Adam<f64>) -> Adam<T> {
    Adam {
        lr: T::lit(a.lr),
        beta1: T::lit(a.beta1),
        beta2: T::lit(a.beta2),
        eps: T::lit(a.eps),
        m: from_f64(&a.m),
        v: from_f64(&a.v),
        t: a.t,
    }
}

impl NetCheckpoint {
    pub fn from_mlp<T: Scalar>(net: &Mlp<T>, adam: Option<&Adam<T>>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            shape: net.shape().clone(),
            params: to_f64(net.params()),
            log_std: None,
            adam: adam.map(adam_to_f64),
        }
    }

    pub fn from_policy<T: Scalar>(policy: &GaussianPolicy<T>) -> Self {
        Self { log_std: Some(to_f64(policy.log_std())), ..Self::from_mlp(&policy.net, None) }
    }

    fn check(&self, shape: &MlpShape) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        if &self.shape != shape {
            return Err(Error::Checkpoint(format!("layout mismatch: stored {:?}, expected {:?}", self.shape, shape)));
        }
        if self.params.len() != shape.param_count() {
            return Err(Error::Checkpoint("parameter count does not match layout".into()));
        }
        Ok(())
    }

    /// Restore into `net` (and `adam` when both sides have moments).
    pub fn restore_mlp<T: Scalar>(&self, net: &mut Mlp<T>, adam: Option<&mut Adam<T>>) -> Result<()> {
        self.check(net.shape())?;
        net.set_params(&from_f64::<T>(&self.params))?;
        if let (Some(dst), Some(src)) = (adam, &self.adam) {
            if src.m.len() != net.params().len() {
                return Err(Error::Checkpoint("optimizer moments do not match layout".into()));
            }
            *dst = adam_from_f64(src);
        }
        Ok(())
    }

    pub fn restore_policy<T: Scalar>(&self, policy: &mut GaussianPolicy<T>) -> Result<()> {
        self.check(policy.net.shape())?;
        let log_std = self.log_std.as_ref().ok_or_else(|| Error::Checkpoint("missing log-std".into()))?;
        if log_std.len() != policy.action_dim() {
            return Err(Error::Checkpoint("log-std length does not match action dimension".into()));
        }
        let mut p = self.params.clone();
        p.extend_from_slice(log_std);
        policy.set_params(&from_f64::<T>(&p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_layout_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = MlpShape::new(4, vec![5], 2).unwrap();
        let net = Mlp::<f64>::init(shape.clone(), 1.0, &mut rng);
        let mut adam = Adam::new(net.params().len(), 1e-3);
        let mut p = net.params().to_vec();
        let g = vec![0.5; p.len()];
        adam.step(&mut p, &g).unwrap();
        let ck = NetCheckpoint::from_mlp(&net, Some(&adam));
        let text = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&text).unwrap();

        let mut other = Mlp::<f64>::zeros(shape);
        let mut other_adam = Adam::new(other.params().len(), 1e-3);
        back.restore_mlp(&mut other, Some(&mut other_adam)).unwrap();
        assert_eq!(other.params(), net.params());
        assert_eq!(other_adam, adam);

        let mut wrong = Mlp::<f64>::zeros(MlpShape::new(4, vec![6], 2).unwrap());
        assert!(back.restore_mlp(&mut wrong, None).is_err());
        let old = NetCheckpoint { version: 0, ..back };
        assert!(old.restore_mlp(&mut other, None).is_err());
    }

    #[test]
    fn policy_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = MlpShape::new(3, vec![4], 1).unwrap();
        let pol = GaussianPolicy::<f64>::new(shape.clone(), -0.5, &mut rng);
        let ck = NetCheckpoint::from_policy(&pol);
        let mut other = GaussianPolicy::<f64>::new(shape, 0.0, &mut rng);
        ck.restore_policy(&mut other).unwrap();
        assert_eq!(other, pol);
    }
}
