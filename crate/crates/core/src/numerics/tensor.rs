use std::fmt;

use super::kernels;
use crate::error::{Error, Result};

/// Dense row-major f32 array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds an `r×c` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Row count and width when viewed as a matrix over the last axis.
    pub fn as_matrix(&self) -> (usize, usize) {
        let width = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / width, width)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let (_, w) = self.as_matrix();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(other)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        Tensor::new(
            vec![m, n],
            kernels::matmul(&self.data, &other.data, m, k, n),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.data.len()];
        let mut lane = vec![0.0f32; len];
        let mut lane_out = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[base + j * inner];
                }
                kernels::softmax_into(&lane, &mut lane_out);
                for (j, &v) in lane_out.iter().enumerate() {
                    out[base + j * inner] = v;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, width) = self.as_matrix();
        if gain.len() != width || bias.len() != width {
            return Err(Error::Shape(format!(
                "layer norm of {:?} with gain {:?} and bias {:?}",
                self.shape, gain.shape, bias.shape
            )));
        }
        let (out, _) = kernels::layer_norm(&self.data, &gain.data, &bias.data, rows, width, eps);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn gelu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| kernels::gelu(v)).collect(),
            grad: None,
        }
    }

    /// Summed (or mean) negative log-likelihood of `targets` under `self`
    /// interpreted as `[t×V]` logits.
    pub fn cross_entropy(&self, targets: &[usize], reduction: Reduction) -> Result<f32> {
        let (rows, vocab) = matrix_dims(self)?;
        check_targets(targets, rows, vocab)?;
        let (losses, _) = kernels::cross_entropy_rows(&self.data, targets, vocab);
        Ok(reduction.apply(&losses) as f32)
    }
}

/// How per-token losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub(crate) fn apply(self, losses: &[f64]) -> f64 {
        let total: f64 = losses.iter().sum();
        match self {
            Reduction::Sum => total,
            Reduction::Mean => total / losses.len().max(1) as f64,
        }
    }

    pub(crate) fn scale(self, count: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count.max(1) as f64,
        }
    }
}

pub(crate) fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
    }
}

pub(crate) fn check_targets(targets: &[usize], rows: usize, vocab: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!(
            "target id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}
