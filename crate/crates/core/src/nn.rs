//! Multilayer perceptron with rectifier hidden activations.
//!
//! The same weights drive two paths: a tape-recorded forward pass for
//! training and a plain forward pass for inference. Both share the
//! kernels in [`crate::linalg`], so they produce identical values.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PlmError, Result};
use crate::linalg;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Fully connected network; `widths` = [input, hidden..., output].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpModel {
    /// He-normal weight init, zero biases.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::validate_widths(widths)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| PlmError::Numeric(e.to_string()))?;
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            weights.push(Tensor::from_vec(vec![fan_in, fan_out], data)?.with_requires_grad());
            biases.push(Tensor::zeros(vec![fan_out]).with_requires_grad());
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// All-zero parameters (logits are zero for every input).
    pub fn zeroed(widths: &[usize]) -> Result<Self> {
        Self::validate_widths(widths)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            weights.push(Tensor::zeros(vec![pair[0], pair[1]]).with_requires_grad());
            biases.push(Tensor::zeros(vec![pair[1]]).with_requires_grad());
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    fn validate_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 {
            return Err(PlmError::Config(
                "a network needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(PlmError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    /// Parameters in a fixed order (per layer: weight then bias).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Register the parameters on a tape so gradients flow into them.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelBinding> {
        self.bind_with(tape, true)
    }

    /// Register the parameters without gradient tracking (frozen net).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<ModelBinding> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Result<ModelBinding> {
        let mut weight_ids = Vec::new();
        let mut bias_ids = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weight_ids.push(tape.leaf(w.shape().to_vec(), w.data().to_vec(), requires_grad)?);
            bias_ids.push(tape.leaf(b.shape().to_vec(), b.data().to_vec(), requires_grad)?);
        }
        Ok(ModelBinding {
            weight_ids,
            bias_ids,
        })
    }

    /// Plain forward pass: logits for a row-major batch.
    pub fn logits(&self, batch: usize, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != batch * self.input_dim() {
            return Err(PlmError::Shape(format!(
                "{} features for batch {batch} with input dim {}",
                features.len(),
                self.input_dim()
            )));
        }
        let mut cur = features.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; batch * fan_out];
            linalg::matmul(batch, fan_in, fan_out, &cur, w.data(), &mut next);
            for row in next.chunks_mut(fan_out) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            if l != last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Softmax of [`Self::logits`], row per instance.
    pub fn posteriors(&self, batch: usize, features: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(batch, features)?;
        let c = self.output_dim();
        let mut out = vec![0.0; logits.len()];
        linalg::softmax_rows(batch, c, &logits, &mut out);
        Ok(out)
    }

    /// Pull gradients off the tape into the parameter tensors.
    pub fn collect_grads(&mut self, grads: &crate::tape::Gradients, binding: &ModelBinding) -> Result<()> {
        for (w, &id) in self.weights.iter_mut().zip(&binding.weight_ids) {
            if let Some(g) = grads.get(id) {
                w.accumulate_grad(g)?;
            }
        }
        for (b, &id) in self.biases.iter_mut().zip(&binding.bias_ids) {
            if let Some(g) = grads.get(id) {
                b.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Bit-exact parameter equality.
    pub fn params_identical(&self, other: &MlpModel) -> bool {
        if self.widths != other.widths {
            return false;
        }
        let same = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.weights
            .iter()
            .zip(&other.weights)
            .all(|(a, b)| same(a, b))
            && self.biases.iter().zip(&other.biases).all(|(a, b)| same(a, b))
    }
}

/// Tape ids of one model's parameters. Reusing the binding for several
/// forward passes on the same tape accumulates gradients correctly.
pub struct ModelBinding {
    weight_ids: Vec<NodeId>,
    bias_ids: Vec<NodeId>,
}

impl ModelBinding {
    /// Recorded forward pass; returns the logits node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.weight_ids.len() - 1;
        for (l, (&w, &b)) in self.weight_ids.iter().zip(&self.bias_ids).enumerate() {
            cur = linear_forward(tape, cur, w, b)?;
            if l != last {
                cur = tape.relu(cur);
            }
        }
        Ok(cur)
    }
}

/// y = x W + b, recorded on the tape.
pub fn linear_forward(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}
