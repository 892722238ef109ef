//! Dense 64-bit tensor with an optional gradient buffer.

use serde::{Deserialize, Serialize};

use crate::error::{PlmError, Result};

/// Row-major dense tensor. Parameters keep `requires_grad = true` and
/// receive their gradient buffer after a backward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PlmError::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Drop the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(PlmError::Shape(format!(
                "gradient length {} does not match tensor of {} elements",
                delta.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }
}
