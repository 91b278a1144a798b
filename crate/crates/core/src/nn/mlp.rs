use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fully connected ReLU network topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let s = Self { input_dim, hidden_dims, output_dim };
        if s.dims().contains(&0) {
            return Err(Error::Config("network dimensions must be ≥ 1".into()));
        }
        Ok(s)
    }

    /// Input, hidden and output widths in order.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    /// `(rows, cols)` of each weight matrix; each layer also owns `rows` biases.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims().windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Unflattened view of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// Row-major, `rows × cols`.
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<T>,
}

/// Parameter vector together with the layer layout it flattens.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<T> {
    pub values: Vec<T>,
    pub layout: Vec<(usize, usize)>,
}

impl<T: Scalar> FlatParams<T> {
    pub fn flatten(layers: &[Layer<T>]) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(layers.len());
        for l in layers {
            layout.push((l.weights.len(), l.weights.first().map_or(0, Vec::len)));
            for row in &l.weights {
                values.extend_from_slice(row);
            }
            values.extend_from_slice(&l.bias);
        }
        Self { values, layout }
    }

    pub fn unflatten(&self) -> Result<Vec<Layer<T>>> {
        let need: usize = self.layout.iter().map(|(r, c)| r * c + r).sum();
        if need != self.values.len() {
            return Err(Error::Dimension { expected: need, got: self.values.len() });
        }
        let mut at = 0;
        let mut layers = Vec::with_capacity(self.layout.len());
        for &(rows, cols) in &self.layout {
            let weights = (0..rows).map(|r| self.values[at + r * cols..at + (r + 1) * cols].to_vec()).collect();
            at += rows * cols;
            let bias = self.values[at..at + rows].to_vec();
            at += rows;
            layers.push(Layer { weights, bias });
        }
        Ok(layers)
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation of layer `l`
    /// (the last entry is the raw linear output).
    pub acts: Vec<Vec<T>>,
    param_version: u64,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// ReLU hidden layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    shape: MlpShape,
    params: Vec<T>,
    version: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(shape: MlpShape) -> Self {
        let n = shape.param_count();
        Self { shape, params: vec![T::zero(); n], version: 0 }
    }

    /// Uniform(±1/√fan_in) weights, zero biases; the output layer is
    /// additionally scaled by `output_scale`.
    pub fn init<R: Rng + ?Sized>(shape: MlpShape, output_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(shape);
        let shapes = net.shape.layer_shapes();
        let mut at = 0;
        for (li, &(rows, cols)) in shapes.iter().enumerate() {
            let mut bound = 1.0 / (cols as f64).sqrt();
            if li + 1 == shapes.len() {
                bound *= output_scale;
            }
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut net.params[at..at + rows * cols] {
                *w = T::lit(u.sample(rng));
            }
            at += rows * cols + rows;
        }
        net
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: p.len() });
        }
        self.params.copy_from_slice(p);
        self.version += 1;
        Ok(())
    }

    pub fn flat(&self) -> FlatParams<T> {
        FlatParams { values: self.params.clone(), layout: self.shape.layer_shapes() }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.acts.pop().unwrap_or_default())
    }

    pub fn forward_cached(&self, x: &[T]) -> Result<ForwardCache<T>> {
        if x.len() != self.shape.input_dim {
            return Err(Error::Dimension { expected: self.shape.input_dim, got: x.len() });
        }
        let shapes = self.shape.layer_shapes();
        let mut acts = Vec::with_capacity(shapes.len() + 1);
        acts.push(x.to_vec());
        let mut at = 0;
        for (li, &(rows, cols)) in shapes.iter().enumerate() {
            let input = &acts[li];
            let w = &self.params[at..at + rows * cols];
            let b = &self.params[at + rows * cols..at + rows * cols + rows];
            let last = li + 1 == shapes.len();
            let out: Vec<T> = (0..rows)
                .map(|r| {
                    let z = w[r * cols..(r + 1) * cols].iter().zip(input).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi);
                    if last {
                        z
                    } else {
                        z.max(T::zero())
                    }
                })
                .collect();
            acts.push(out);
            at += rows * cols + rows;
        }
        Ok(ForwardCache { acts, param_version: self.version })
    }

    /// Accumulate `scale · ∂(out_grad · output)/∂θ` into `grad`.
    pub fn backward(&self, cache: &ForwardCache<T>, out_grad: &[T], scale: T, grad: &mut [T]) -> Result<()> {
        if cache.param_version != self.version {
            return Err(Error::Invalid("forward cache is stale".into()));
        }
        if out_grad.len() != self.shape.output_dim {
            return Err(Error::Dimension { expected: self.shape.output_dim, got: out_grad.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: grad.len() });
        }
        let shapes = self.shape.layer_shapes();
        let offsets = layer_offsets(&shapes);
        let mut delta: Vec<T> = out_grad.iter().map(|&g| g * scale).collect();
        for li in (0..shapes.len()).rev() {
            let (rows, cols) = shapes[li];
            let at = offsets[li];
            let input = &cache.acts[li];
            for r in 0..rows {
                let d = delta[r];
                if d == T::zero() {
                    continue;
                }
                let gw = &mut grad[at + r * cols..at + (r + 1) * cols];
                for (g, &xi) in gw.iter_mut().zip(input) {
                    *g = *g + d * xi;
                }
                grad[at + rows * cols + r] = grad[at + rows * cols + r] + d;
            }
            if li == 0 {
                break;
            }
            let w = &self.params[at..at + rows * cols];
            let mut prev = vec![T::zero(); cols];
            for r in 0..rows {
                let d = delta[r];
                if d == T::zero() {
                    continue;
                }
                for (p, &wi) in prev.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *p = *p + d * wi;
                }
            }
            // ReLU gate of the layer below
            for (p, &a) in prev.iter_mut().zip(&cache.acts[li]) {
                if a <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
        Ok(())
    }

    /// Directional derivative of the output along parameter direction `v`.
    pub fn jvp(&self, cache: &ForwardCache<T>, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: v.len() });
        }
        let shapes = self.shape.layer_shapes();
        let offsets = layer_offsets(&shapes);
        let mut tangent = vec![T::zero(); self.shape.input_dim];
        for (li, &(rows, cols)) in shapes.iter().enumerate() {
            let at = offsets[li];
            let input = &cache.acts[li];
            let w = &self.params[at..at + rows * cols];
            let vw = &v[at..at + rows * cols];
            let vb = &v[at + rows * cols..at + rows * cols + rows];
            let last = li + 1 == shapes.len();
            let next: Vec<T> = (0..rows)
                .map(|r| {
                    let mut d = vb[r];
                    for c in 0..cols {
                        d = d + vw[r * cols + c] * input[c] + w[r * cols + c] * tangent[c];
                    }
                    if !last && cache.acts[li + 1][r] <= T::zero() {
                        T::zero()
                    } else {
                        d
                    }
                })
                .collect();
            tangent = next;
        }
        Ok(tangent)
    }
}

fn layer_offsets(shapes: &[(usize, usize)]) -> Vec<usize> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let o = at;
            at += r * c + r;
            o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_and_identity_layer() {
        let net = Mlp::<f64>::zeros(MlpShape::new(3, vec![4], 2).unwrap());
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let mut id = Mlp::<f64>::zeros(MlpShape::new(2, vec![], 2).unwrap());
        id.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(id.forward(&[0.3, -7.0]).unwrap(), vec![0.3, -7.0]);
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut net = Mlp::<f64>::zeros(MlpShape::new(2, vec![], 2).unwrap());
        net.set_params(&[0.5, -1.0, 2.0, 0.25, 0.1, -0.2]).unwrap();
        let x = [3.0, -4.0];
        let cache = net.forward_cached(&x).unwrap();
        let mut g = vec![0.0; 6];
        net.backward(&cache, &[1.0, 2.0], 1.0, &mut g).unwrap();
        assert_eq!(g, vec![3.0, -4.0, 6.0, -8.0, 1.0, 2.0]);

        let mut z = vec![0.0; 6];
        net.backward(&cache, &[0.0, 0.0], 1.0, &mut z).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::<f64>::init(MlpShape::new(2, vec![3], 1).unwrap(), 1.0, &mut rng);
        let cache = net.forward_cached(&[1.0, 1.0]).unwrap();
        let p = net.params().to_vec();
        net.set_params(&p).unwrap();
        let mut g = vec![0.0; p.len()];
        assert!(net.backward(&cache, &[1.0], 1.0, &mut g).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::<f64>::init(MlpShape::new(3, vec![5, 2], 4).unwrap(), 1.0, &mut rng);
        let flat = net.flat();
        let layers = flat.unflatten().unwrap();
        assert_eq!(layers.len(), 3);
        assert_eq!(layers[1].weights.len(), 2);
        assert_eq!(FlatParams::flatten(&layers), flat);
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::init(MlpShape::new(3, vec![6, 5], 2).unwrap(), 1.0, &mut rng);
        let v: Vec<f64> = (0..net.params().len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let x = [0.3, -0.8, 1.1];
        let jv = net.jvp(&net.forward_cached(&x).unwrap(), &v).unwrap();
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut n = net.clone();
            let p: Vec<f64> = net.params().iter().zip(&v).map(|(a, b)| a + s * b).collect();
            n.set_params(&p).unwrap();
            n.forward(&x).unwrap()
        };
        let (up, dn) = (shifted(h), shifted(-h));
        for o in 0..2 {
            let fd = (up[o] - dn[o]) / (2.0 * h);
            assert!((fd - jv[o]).abs() < 1e-7, "{fd} vs {}", jv[o]);
        }
    }
}
