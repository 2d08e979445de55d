//! A small fully connected feature extractor: affine layers with ReLU between
//! them and a final linear projection into the embedding space.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::LabeledExample;

/// `output = weights * input + bias`, weights stored row-major (`output x input`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            weights: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    /// Normal weights with variance `gain / input`, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (gain / input as f64).sqrt()).expect("valid std");
        Self {
            input,
            output,
            weights: (0..input * output).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; output],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.input)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to `x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.input];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.input..(o + 1) * self.input];
            let grow = &mut grad.weights[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn shape_matches(&self) -> bool {
        self.weights.len() == self.input * self.output && self.bias.len() == self.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorModel {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ExtractorModel {
    /// `dims` is `[input, hidden..., embedding]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "extractor dims must be at least [input, embedding] and non-zero, got {dims:?}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::random(w[0], w[1], if i == last { 1.0 } else { 2.0 }, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("extractor needs at least one layer".into()));
        }
        for l in &layers {
            if !l.shape_matches() {
                return Err(Error::InvalidArgument(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.output,
                    l.input,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output,
                    found: pair[1].input,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.input, l.output))
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input];
        dims.extend(self.layers.iter().map(|l| l.output));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(std::mem::take(&mut h));
            if i == last {
                h = z;
            } else {
                h = z.iter().map(|v| v.max(0.0)).collect();
                pre.push(z);
            }
        }
        Ok((h, ForwardTrace { inputs, pre }))
    }

    /// Backpropagates `grad_out` (gradient at the embedding) into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64], grads: &mut ExtractorModel) {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (gv, z) in g.iter_mut().zip(&trace.pre[i]) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = self.layers[i].backward(&trace.inputs[i], &g, &mut grads.layers[i]);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Visits every parameter in checkpoint order: per layer, weights row-major then bias.
pub fn layer_params(layers: &[&DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

pub fn layer_params_mut(layers: Vec<&mut DenseLayer>) -> Vec<&mut f64> {
    layers
        .into_iter()
        .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
        .collect()
}

/// Replaces every example's features with its embedding.
pub fn embed_examples(model: &ExtractorModel, examples: &[LabeledExample]) -> Result<Vec<LabeledExample>> {
    use rayon::prelude::*;
    examples
        .par_iter()
        .map(|ex| {
            Ok(LabeledExample {
                id: ex.id.clone(),
                features: model.forward(&ex.features)?,
                label: ex.label,
            })
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
