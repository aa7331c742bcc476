//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation applied to its variables. Parameters
//! are borrowed from a [`ParamStore`] rather than copied, so a tape lives no
//! longer than the store it reads from. One tape per thread; the store itself
//! may be shared by any number of tapes.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, NormStats};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{check_targets, Reduction, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
        scale: f64,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f32]>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    params: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f32>>>,
}

impl<'a> Tape<'a> {
    /// A tape with no parameter store; only inputs and variables.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: &'a ParamStore) -> Self {
        Tape {
            params: Some(params),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f32]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, false)
    }

    /// Input whose gradient is tracked and readable via [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, true)
    }

    /// Borrowed view of a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Index(format!("parameter {} not in store", id.0)));
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Param(id),
            true,
        );
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> Result<f32> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::Contract(format!(
                "expected a scalar, got {} values",
                other.len()
            ))),
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let out = kernels::transpose(self.value(x), rows, cols);
        let rg = self.needs(&[x]);
        Ok(self.push(
            vec![cols, rows],
            Cow::Owned(out),
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "row bias {:?} for matrix {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(shape, Cow::Owned(out), Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        self.push(shape, Cow::Owned(out), Op::Scale { x, factor }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        self.push(shape, Cow::Owned(out), Op::Gelu { x }, rg)
    }

    /// Softmax over the last axis. With `causal`, row `i` only sees
    /// columns `0..=i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Shape("empty shape".into()))?;
        let rows = self.value(x).len() / cols;
        let out = kernels::softmax_rows(self.value(x), rows, cols, causal);
        let rg = self.needs(&[x]);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { x, rows, cols }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::Shape("empty shape".into()))?;
        if self.value(gain).len() != width || self.value(bias).len() != width {
            return Err(Error::Shape(format!(
                "layer norm of {:?} with gain {:?} and bias {:?}",
                shape,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).len() / width;
        let (out, stats) = kernels::layer_norm(
            self.value(x),
            self.value(gain),
            self.value(bias),
            rows,
            width,
            eps,
        );
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Selects rows `ids` of a `V×h` table into an `n×h` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} of a {rows}-row table")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), width],
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if len == 0 || start + len > cols {
            return Err(Error::Shape(format!(
                "columns {start}..{} of a {cols}-column matrix",
                start + len
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            vec![rows, len],
            Cow::Owned(out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::Shape(format!("concat of {r} rows with {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            vec![rows, total],
            Cow::Owned(out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of
    /// `[t×V]` logits, reduced to a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits)?;
        check_targets(targets, rows, vocab)?;
        let (losses, probs) = kernels::cross_entropy_rows(self.value(logits), targets, vocab);
        let total = reduction.apply(&losses);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![total as f32]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale: reduction.scale(rows),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().map(|&v| f64::from(v)).sum();
        let rg = self.needs(&[x]);
        self.push(vec![1], Cow::Owned(vec![total as f32]), Op::Sum { x }, rg)
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        self.push(shape, Cow::Owned(out), Op::Dropout { x, mask }, rg)
    }

    /// `x · w + b` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Propagates d`loss`/d· through the tape. Returns the gradients of
    /// every parameter reachable from `loss`; input variables' gradients are
    /// kept on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                out.push(*id, g.clone());
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn propagate(&self, node: &Node<'a>, dy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut send = |target: Var, g: Vec<f32>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    send(a, kernels::matmul_nt(dy, self.value(b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(b, kernels::matmul_tn(self.value(a), dy, m, k, n));
                }
            }
            &Op::Transpose { x, rows, cols } => send(x, kernels::transpose(dy, cols, rows)),
            &Op::Add { a, b } => {
                send(a, dy.to_vec());
                send(b, dy.to_vec());
            }
            &Op::AddRow { x, bias } => {
                let n = self.value(bias).len();
                let mut db = vec![0.0f64; n];
                for (i, &g) in dy.iter().enumerate() {
                    db[i % n] += f64::from(g);
                }
                send(x, dy.to_vec());
                send(bias, db.into_iter().map(|v| v as f32).collect());
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                send(a, dy.iter().zip(vb).map(|(g, v)| g * v).collect());
                send(b, dy.iter().zip(va).map(|(g, v)| g * v).collect());
            }
            &Op::Scale { x, factor } => send(x, dy.iter().map(|g| g * factor).collect()),
            &Op::Gelu { x } => send(
                x,
                dy.iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect(),
            ),
            &Op::Softmax { x, rows, cols } => send(
                x,
                kernels::softmax_rows_backward(&node.value, dy, rows, cols),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let width = self.value(*gain).len();
                let rows = self.value(*x).len() / width;
                let (dx, dg, db) = kernels::layer_norm_backward(
                    self.value(*x),
                    self.value(*gain),
                    stats,
                    dy,
                    rows,
                    width,
                );
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                let mut dt = vec![0.0f32; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, g) in dt[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&dy[r * width..(r + 1) * width])
                    {
                        *d += g;
                    }
                }
                send(*table, dt);
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                let len = node.shape[1];
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                send(x, dx);
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    send(p, dp);
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let vocab = self.shape(*logits)[1];
                let factor = f64::from(dy[0]) * scale;
                let mut dl: Vec<f32> = probs
                    .iter()
                    .map(|&p| (f64::from(p) * factor) as f32)
                    .collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= factor as f32;
                }
                send(*logits, dl);
            }
            &Op::Sum { x } => send(x, vec![dy[0]; self.value(x).len()]),
            Op::Dropout { x, mask } => send(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
        }
        Ok(())
    }
}
