use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// One fully connected layer, `y = act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// Weights drawn i.i.d. from `N(mean, std^2)`, bias zero. Reproducible
    /// for a given seed.
    pub fn gaussian(
        input: usize,
        output: usize,
        activation: Activation,
        mean: f64,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(invalid(format!("init std must be >= 0, got {std}")));
        }
        let mut layer = Self::zeros(input, output, activation);
        if std == 0.0 {
            layer.weight.fill(mean);
            return Ok(layer);
        }
        let normal = Normal::new(mean, std).map_err(|e| invalid(e.to_string()))?;
        let mut r = rng::stream(seed, rng::streams::INIT);
        layer.weight.iter_mut().for_each(|w| *w = normal.sample(&mut r));
        Ok(layer)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Cached activations from one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    fingerprint: u64,
}

impl Tape {
    /// Hash of the relu on/off pattern; changes exactly when a probe crosses
    /// a kink.
    pub fn activation_signature(&self, layers: &[Dense]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (z, layer) in self.pre.iter().zip(layers) {
            if layer.activation == Activation::Relu {
                for &v in z.iter() {
                    h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    /// Pre-activations of the last layer.
    pub fn output_pre_activation(&self) -> &Array2<f64> {
        self.pre.last().expect("tape of a non-empty network")
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
}

impl MlpGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Relu hidden layers and an identity output layer with sizes `dims`,
    /// weights `N(0, std^2)`. Layer `k` uses sub-stream `k` of `seed`.
    pub fn gaussian(dims: &[usize], std: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(invalid(format!("bad layer sizes {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let layer_seed = seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9));
                Dense::gaussian(dims[k], dims[k + 1], act, 0.0, std, layer_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let z = cur.dot(&layer.weight.t()) + &layer.bias;
            let out = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(cur);
            pre.push(z);
            cur = out;
        }
        Ok((
            cur,
            Tape {
                inputs,
                pre,
                fingerprint: self.fingerprint(),
            },
        ))
    }

    /// Forward pass for a single sample.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| invalid(e.to_string()))?;
        let (y, tape) = self.forward_batch(row)?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse-mode pass. `dy` holds d(loss)/d(output) per row; parameter
    /// gradients are summed over the batch.
    pub fn backward(&self, tape: &Tape, dy: ArrayView2<f64>) -> Result<(Array2<f64>, MlpGrads)> {
        if tape.pre.len() != self.layers.len() || tape.fingerprint != self.fingerprint() {
            return Err(Error::StaleTape(
                "tape was recorded with different parameters".into(),
            ));
        }
        if dy.nrows() != tape.batch_size() || dy.ncols() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: dy.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dy.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                delta.zip_mut_with(&tape.pre[k], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let dw = delta.t().dot(&tape.inputs[k]);
            let db = delta.sum_axis(Axis(0));
            let dx = delta.dot(&layer.weight);
            grads.push(DenseGrads {
                weight: dw,
                bias: db,
            });
            delta = dx;
        }
        grads.reverse();
        Ok((delta, MlpGrads { layers: grads }))
    }

    /// Parameters in a fixed order: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`Mlp::to_flat`]; returns the number of values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(Error::LengthMismatch {
                what: "flat parameters",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[k];
                k += 1;
            }
        }
        Ok(k)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{gradcheck, GradCheck};
    use ndarray::{array, Array2};
    use rand::Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        l.weight = Array2::eye(3);
        let net = Mlp::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap().0, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::gaussian(&[4, 5, 2], 0.0, 1).unwrap();
        assert_eq!(net.forward(&[1., 2., 3., 4.]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_relu_hand_trace() {
        // h = relu([[1, -1], [2, 0.5]] x + [0, -1]); y = [3, -2] h + 0.5
        let l1 = Dense {
            weight: array![[1.0, -1.0], [2.0, 0.5]],
            bias: array![0.0, -1.0],
            activation: Activation::Relu,
        };
        let l2 = Dense {
            weight: array![[3.0, -2.0]],
            bias: array![0.5],
            activation: Activation::Identity,
        };
        let net = Mlp::new(vec![l1, l2]).unwrap();
        // x = (1, 2): z1 = (-1, 2) -> h = (0, 2) -> y = -4 + 0.5
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap().0, vec![-3.5]);
        // x = (2, 0): z1 = (2, 3) -> h = (2, 3) -> y = 6 - 6 + 0.5
        assert_eq!(net.forward(&[2.0, 0.0]).unwrap().0, vec![0.5]);
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::gaussian(&[3, 2], 0.1, 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(Mlp::new(vec![Dense::zeros(2, 3, Activation::Relu), Dense::zeros(2, 1, Activation::Identity)]).is_err());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let net = Mlp::gaussian(&[3, 2], 0.5, 9).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = net.forward(&x).unwrap();
        let dy = array![[1.5, -0.5]];
        let (_, g) = net.backward(&tape, dy.view()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(g.layers[0].weight[[i, j]], dy[[0, i]] * x[j]);
            }
        }
        assert_eq!(g.layers[0].bias, array![1.5, -0.5]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let l1 = Dense {
            weight: array![[1.0], [-1.0]],
            bias: array![0.0, 0.0],
            activation: Activation::Relu,
        };
        let l2 = Dense {
            weight: array![[1.0, 1.0]],
            bias: array![0.0],
            activation: Activation::Identity,
        };
        let net = Mlp::new(vec![l1, l2]).unwrap();
        let (_, tape) = net.forward(&[2.0]).unwrap();
        let (dx, g) = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weight[[1, 0]], 0.0);
        assert_eq!(g.layers[0].bias[1], 0.0);
        assert_eq!(g.layers[1].weight[[0, 1]], 0.0);
        assert_eq!(dx[[0, 0]], 1.0);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut net = Mlp::gaussian(&[2, 3, 1], 0.3, 4).unwrap();
        let (_, tape) = net.forward(&[1.0, 1.0]).unwrap();
        net.layers[0].bias[0] += 1.0;
        assert!(matches!(
            net.backward(&tape, array![[1.0]].view()),
            Err(Error::StaleTape(_))
        ));
        let other = Mlp::gaussian(&[2, 1], 0.3, 4).unwrap();
        assert!(other.backward(&tape, array![[1.0]].view()).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let net = Mlp::gaussian(&[3, 4, 2], 0.2, 5).unwrap();
        let mut other = Mlp::gaussian(&[3, 4, 2], 0.0, 0).unwrap();
        assert_eq!(other.load_flat(&net.to_flat()).unwrap(), net.num_params());
        assert_eq!(other, net);
    }

    #[test]
    fn gaussian_init_properties() {
        let z = Dense::gaussian(10, 10, Activation::Relu, 0.25, 0.0, 1).unwrap();
        assert!(z.weight.iter().all(|&w| w == 0.25));
        let a = Dense::gaussian(100, 100, Activation::Relu, 0.0, 1e-4, 42).unwrap();
        let b = Dense::gaussian(100, 100, Activation::Relu, 0.0, 1e-4, 42).unwrap();
        assert_eq!(a, b);
        let n = a.weight.len() as f64;
        let mean = a.weight.sum() / n;
        assert!(mean.abs() < 3.0 * 1e-4 / n.sqrt(), "mean {mean}");
        assert!(Dense::gaussian(1, 1, Activation::Relu, 0.0, -1.0, 0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_random_nets() {
        let mut r = rng::stream(77, 0);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for trial in 0..20 {
            let net = Mlp::gaussian(&[3, 6, 5, 2], 0.7, trial).unwrap();
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            // scalar objective: c . y
            let loss = |p: &[f64]| {
                let mut n = net.clone();
                n.load_flat(p).unwrap();
                let (y, tape) = n.forward(&x).unwrap();
                (y.iter().zip(&c).map(|(a, b)| a * b).sum(), tape.activation_signature(&n.layers))
            };
            let (_, tape) = net.forward(&x).unwrap();
            let dy = Array2::from_shape_vec((1, 2), c.clone()).unwrap();
            let (_, g) = net.backward(&tape, dy.view()).unwrap();
            let report = gradcheck(loss, &net.to_flat(), &g.to_flat(), &GradCheck::default(), None);
            worst = worst.max(report.max_rel_err);
            checked += report.checked;
        }
        assert!(checked >= 100);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::gaussian(&[4, 8, 3], 0.6, 3).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        let c = [0.5, -1.0, 2.0];
        let (_, tape) = net.forward(&x).unwrap();
        let (dx, _) = net
            .backward(&tape, Array2::from_shape_vec((1, 3), c.to_vec()).unwrap().view())
            .unwrap();
        let f = |xs: &[f64]| {
            let (y, t) = net.forward(xs).unwrap();
            (y.iter().zip(&c).map(|(a, b)| a * b).sum(), t.activation_signature(&net.layers))
        };
        let report = gradcheck(f, &x, dx.as_slice().unwrap(), &GradCheck::default(), None);
        assert!(report.passed(), "{report:?}");
    }
}
