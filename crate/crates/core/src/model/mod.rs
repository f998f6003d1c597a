//! Fully-connected ReLU classifier with hand-written reverse-mode gradients.

mod checkpoint;
pub(crate) mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use train::{fine_tune_oe, train_classifier, TrainConfig, Trained};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::LogitLoss;
use crate::tensor::{SeededRng, Tensor};

/// One affine layer, `y = W x + b`, with `W` stored row-major as
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "layer {out_dim}x{in_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite layer parameter"));
        }
        Ok(Linear {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn apply(&self, x: &[f32], relu: bool) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| {
                let acc = row
                    .iter()
                    .zip(x)
                    .fold(b as f64, |acc, (&w, &v)| acc + w as f64 * v as f64);
                let y = acc as f32;
                if relu && y <= 0.0 {
                    0.0
                } else {
                    y
                }
            })
            .collect()
    }
}

/// Activations of every layer from one forward pass. `activations[0]` is the
/// input and the last entry holds the logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f32>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f32] {
        self.activations.last().expect("trace is never empty")
    }

    /// Input to the logit layer.
    pub fn features(&self) -> &[f32] {
        &self.activations[self.activations.len() - 2]
    }
}

/// Per-layer parameter gradients, accumulated in `f64`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        ParamGrads {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Flattened in checkpoint order: each layer's weights, then its biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// MLP with ReLU on every hidden layer and identity on the logit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Linear>,
}

impl MlpModel {
    /// Randomly initialised model over `dims = [d, h_1, ..., c]`: weights
    /// uniform in `+/- sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dimensions"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-bound, bound) as f32)
                    .collect();
                Linear::new(fan_out, fan_in, weights, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpModel { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {len}, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Full forward pass keeping every activation.
    pub fn trace(&self, x: &[f32]) -> ForwardTrace {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.apply(activations.last().unwrap(), i != last);
            activations.push(next);
        }
        ForwardTrace { activations }
    }

    /// Logits for a single input slice. Panics on a dimension mismatch.
    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, i != last);
        }
        h
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.len())?;
        Ok(Tensor::from_parts_unchecked(vec![self.class_count()], self.logits(x.data())))
    }

    /// Penultimate features, i.e. the input of the logit layer.
    pub fn features(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for layer in &self.layers[..last] {
            h = layer.apply(&h, true);
        }
        h
    }

    /// Applies only the logit layer to a feature vector.
    pub fn head(&self, features: &[f32]) -> Vec<f32> {
        self.layers[self.layers.len() - 1].apply(features, false)
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> f64 {
        let correct = data
            .inputs()
            .iter_rows()
            .zip(data.labels())
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / data.len() as f64
    }

    /// Back-propagates `dlogits` through a recorded pass and returns the
    /// gradient with respect to the input. Parameter gradients are added into
    /// `grads` when given. The ReLU subgradient at 0 is 0.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], mut grads: Option<&mut ParamGrads>) -> Vec<f64> {
        let mut delta = dlogits.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[l];
            if let Some(g) = grads.as_deref_mut() {
                let gw = &mut g.weights[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gwi, &xi) in row.iter_mut().zip(input) {
                        *gwi += d * xi as f64;
                    }
                    g.bias[l][o] += d;
                }
            }
            let mut prev = vec![0.0f64; layer.in_dim];
            for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w as f64;
                }
            }
            if l > 0 {
                // input[l] is the ReLU output of layer l-1
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Gradient of `loss(f(x))` with respect to `x`.
    pub fn input_gradient(&self, x: &Tensor, loss: &LogitLoss) -> Result<Tensor> {
        self.check_input(x.len())?;
        let trace = self.trace(x.data());
        let g = self.backward(&trace, &loss.grad(trace.logits()), None);
        Ok(Tensor::from_parts_unchecked(
            x.shape().to_vec(),
            g.into_iter().map(|v| v as f32).collect(),
        ))
    }

    /// Gradient of `loss(f(x))` with respect to all parameters, flattened in
    /// checkpoint order.
    pub fn param_gradient(&self, x: &[f32], loss: &LogitLoss) -> Vec<f64> {
        let trace = self.trace(x);
        let mut grads = ParamGrads::zeros_like(self);
        self.backward(&trace, &loss.grad(trace.logits()), Some(&mut grads));
        grads.flatten()
    }

    /// All parameters flattened in checkpoint order.
    pub fn params_flat(&self) -> Tensor {
        let data: Vec<f32> = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect();
        Tensor::from_parts_unchecked(vec![data.len()], data)
    }

    /// Copy of this model with parameters replaced from a flat vector.
    pub fn with_params_flat(&self, params: &[f32]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            layers.push(Linear::new(l.out_dim, l.in_dim, w.to_vec(), b.to_vec())?);
            rest = tail;
        }
        Ok(MlpModel { layers })
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = (&mut Vec<f32>, &mut Vec<f32>)> {
        self.layers.iter_mut().map(|l| (&mut l.weights, &mut l.bias))
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fd_gradient, max_relative_error};

    fn identity_model() -> MlpModel {
        MlpModel::from_layers(vec![Linear::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap()]).unwrap()
    }

    // Plain triple-loop forward pass kept independent of `Linear::apply`.
    fn naive_forward(model: &MlpModel, x: &[f32]) -> Vec<f64> {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let n = model.layers().len();
        for (li, l) in model.layers().iter().enumerate() {
            let mut out = vec![0.0; l.out_dim()];
            for o in 0..l.out_dim() {
                let mut s = l.bias()[o] as f64;
                for i in 0..l.in_dim() {
                    s += l.weights()[o * l.in_dim() + i] as f64 * h[i];
                }
                out[o] = if li + 1 < n { s.max(0.0) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let x = Tensor::from_vec(vec![3.0, -1.0]).unwrap();
        assert_eq!(identity_model().forward(&x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut rng = SeededRng::new(3);
        let m = MlpModel::new(&[4, 5, 3], &mut rng).unwrap();
        let zero = m.with_params_flat(&vec![0.0; m.param_count()]).unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(zero.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = SeededRng::new(11);
        for _ in 0..10 {
            let m = MlpModel::new(&[2, 16, 3], &mut rng).unwrap();
            let x: Vec<f32> = (0..2).map(|_| rng.standard_normal() as f32).collect();
            let got = m.logits(&x);
            let want = naive_forward(&m, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_features_nonnegative() {
        let mut rng = SeededRng::new(5);
        let m = MlpModel::new(&[6, 8, 8, 3], &mut rng).unwrap();
        let x: Vec<f32> = (0..6).map(|_| rng.standard_normal() as f32).collect();
        let a: Vec<u32> = m.logits(&x).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = m.logits(&x).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert!(m.features(&x).iter().all(|&v| v >= 0.0));
        assert_eq!(m.head(&m.features(&x)), m.logits(&x));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(identity_model().forward(&x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn logit_gradient_of_linear_model_is_weight_row() {
        let w = vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0];
        let m = MlpModel::from_layers(vec![Linear::new(2, 3, w.clone(), vec![0.1, 0.2]).unwrap()]).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]).unwrap();
        let g = m.input_gradient(&x, &LogitLoss::Logit { index: 1 }).unwrap();
        assert_eq!(g.data(), &w[3..6]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        // all-zero logit layer makes every loss constant in x
        let m = MlpModel::from_layers(vec![
            Linear::new(3, 2, vec![1.0, -1.0, 0.5, 0.5, 2.0, 0.0], vec![0.0; 3]).unwrap(),
            Linear::new(2, 3, vec![0.0; 6], vec![0.3, -0.3]).unwrap(),
        ])
        .unwrap();
        let x = Tensor::from_vec(vec![0.4, 0.9]).unwrap();
        let g = m.input_gradient(&x, &LogitLoss::CrossEntropy { label: 0 }).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_input_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let m = MlpModel::new(&[4, 8, 8, 3], &mut rng).unwrap();
        let x = Tensor::from_vec((0..4).map(|_| rng.standard_normal() as f32).collect()).unwrap();
        let loss = LogitLoss::CrossEntropy { label: 2 };
        let analytic = m.input_gradient(&x, &loss).unwrap();
        let numeric = fd_gradient(|p| loss.value(&m.logits(p.data())), &x, 1e-3);
        let err = max_relative_error(analytic.data(), numeric.data());
        assert!(err < 1e-3, "relative error {err}");
    }
}
