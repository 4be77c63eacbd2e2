//! Batched fully connected network with ReLU hidden layers and a linear
//! output layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`, so a batch maps as `x · W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn fan_in_uniform(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. With `zero_last` the final layer
    /// starts at zero so the initial output is identically zero.
    pub fn new(sizes: &[usize], zero_last: bool, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                if zero_last && l == n - 1 {
                    Linear::zeros(sizes[l], sizes[l + 1])
                } else {
                    Linear::fan_in_uniform(sizes[l], sizes[l + 1], rng)
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Linear::zeros(l.input(), l.output())).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::output));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass over a batch (`rows × input`).
    pub fn forward(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if l != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(a);
            a = z;
        }
        MlpCache { inputs, output: a }
    }

    /// Gradients of the parameters (as an `Mlp`) and of the input.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = d_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let a = &cache.inputs[l];
            let dw = a.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.layers[l].weight.t());
            if l > 0 {
                // `a` is a ReLU output, positive exactly where the unit was active.
                ndarray::Zip::from(&mut da).and(a).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(Linear { weight: dw, bias: db });
            dz = da;
        }
        grads.reverse();
        (Mlp { layers: grads }, dz)
    }

    /// Parameter slices in a fixed order (weight, bias per layer).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    /// Builds a network of the given sizes from flat parameters.
    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Option<Self> {
        if sizes.len() < 2 {
            return None;
        }
        let mut m = Mlp {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        };
        if flat.len() != m.param_count() {
            return None;
        }
        m.set_flat_params(flat);
        Some(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::new(&[5, 8, 8, 11], true, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.3 - 2.0);
        assert!(m.forward(x.view()).output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // h = relu(x·W1 + b1), y = h·W2 + b2.
        let m = Mlp {
            layers: vec![
                Linear {
                    weight: array![[1.0, 0.0], [0.0, 1.0]],
                    bias: array![0.0, -1.0],
                },
                Linear {
                    weight: array![[2.0, 0.0], [1.0, 3.0]],
                    bias: array![0.5, 0.0],
                },
            ],
        };
        let y = m.forward(array![[0.5, 0.25]].view()).output;
        // h = (0.5, relu(-0.75)) = (0.5, 0); y = (1.0 + 0.5, 0).
        assert_eq!(y, array![[1.5, 0.0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mlp::new(&[3, 6, 5, 2], false, &mut rng);
        let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((7, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |m: &Mlp, x: &Array2<f64>| (&m.forward(x.view()).output * &w).sum();
        let cache = m.forward(x.view());
        let (g, dx) = m.backward(&cache, w.view());
        let eps = 1e-6;
        let flat = m.flat_params();
        let gflat = g.flat_params();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += eps;
            m.set_flat_params(&p);
            let lp = loss(&m, &x);
            p[i] -= 2.0 * eps;
            m.set_flat_params(&p);
            let lm = loss(&m, &x);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((gflat[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "param {i}");
        }
        m.set_flat_params(&flat);
        for r in 0..7 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r, c)] += eps;
                let mut xm = x.clone();
                xm[(r, c)] -= eps;
                let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * eps);
                assert!((dx[(r, c)] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&[4, 3, 2], false, &mut rng);
        let back = Mlp::from_flat(&m.sizes(), &m.flat_params()).unwrap();
        assert_eq!(m, back);
        assert!(Mlp::from_flat(&[4, 3, 2], &[0.0; 3]).is_none());
    }
}
