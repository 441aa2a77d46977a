//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value; `backward`
//! walks the list from the output toward the leaves. Since nodes can only
//! reference earlier nodes, index order is a topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Square(usize),
    Sqrt(usize),
    ConcatCols(usize, usize),
    Column(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn unary(&mut self, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let value = f(&self.nodes[ia].value)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, op(ia), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, kernels::matmul, Op::MatMul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                x.same_shape(y, "add")?;
                Ok(x.zip(y, |p, q| p + q))
            },
            Op::Add,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                x.same_shape(y, "sub")?;
                Ok(x.zip(y, |p, q| p - q))
            },
            Op::Sub,
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                x.same_shape(y, "mul")?;
                Ok(x.zip(y, |p, q| p * q))
            },
            Op::Mul,
        )
    }

    /// `[n, k] + [k]`, broadcasting the row over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.binary(a, row, kernels::add_row, Op::AddRow)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v * c);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Scale(ia, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| v + c)), Op::AddScalar)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(kernels::relu(x)), Op::Relu)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::softmax_rows, Op::Softmax)
    }

    /// Natural log with the input clamped below at [`kernels::LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(kernels::log_clamped(x)), Op::Log)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(x.data().iter().sum())), Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if x.is_empty() {
                    return Err(Error::InvalidShape {
                        op: "mean",
                        msg: "mean of an empty tensor".into(),
                    });
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            },
            Op::Mean,
        )
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sum_rows, Op::SumRows)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| v * v)), Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if x.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::NonFinite("sqrt of a negative value".into()));
                }
                Ok(x.map(f64::sqrt))
            },
            Op::Sqrt,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, kernels::concat_cols, Op::ConcatCols)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = kernels::column(&self.nodes[ia].value, j)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Column(ia, j), rg))
    }

    /// Elementwise `sqrt(x² + ε²) − ε`.
    pub fn smooth_abs(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("smooth_abs epsilon must be positive, got {eps}")));
        }
        let sq = self.square(a)?;
        let shifted = self.add_scalar(sq, eps * eps)?;
        let root = self.sqrt(shifted)?;
        self.add_scalar(root, -eps)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let out_value = &self.nodes[out].value;
        if out_value.len() != 1 {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::filled(out_value.shape(), 1.0));

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node.op, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|p| {
                grads[p.idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.idx].value.shape()))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            params: self.params.clone(),
            grads: params,
        })
    }

    fn propagate(&self, op: Op, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, contrib: Tensor| match &mut grads[j] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, kernels::matmul_bt(g, val(b)));
                }
                if wants(b) {
                    acc(b, kernels::matmul_at(val(a), g));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.zip(val(b), |x, y| x * y));
                }
                if wants(b) {
                    acc(b, g.zip(val(a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(row) {
                    let k = g.cols();
                    let mut sums = vec![0.0; k];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let shape = val(row).shape().to_vec();
                    acc(row, Tensor::new(shape, sums).expect("row grad"));
                }
            }
            Op::Scale(a, c) => acc(a, g.map(|v| v * c)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Relu(a) => acc(a, g.zip(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let (n, k) = (y.rows(), y.cols());
                let mut out = g.clone();
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..k {
                        out.data_mut()[r * k + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(a, out);
            }
            Op::Log(a) => acc(
                a,
                g.zip(val(a), |gv, x| if x > kernels::LOG_FLOOR { gv / x } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(a, Tensor::filled(val(a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                let gv = g.data()[0] / n;
                acc(a, Tensor::filled(val(a).shape(), gv));
            }
            Op::SumRows(a) => {
                let src = val(a);
                let k = src.cols();
                let mut out = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    let gv = g.data()[r];
                    out.data_mut()[r * k..(r + 1) * k].fill(gv);
                }
                acc(a, out);
            }
            Op::Square(a) => acc(a, g.zip(val(a), |gv, x| 2.0 * x * gv)),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                // Subgradient 0 at the origin keeps distances of identical points finite.
                acc(a, g.zip(y, |gv, s| if s > 0.0 { gv / (2.0 * s) } else { 0.0 }));
            }
            Op::ConcatCols(a, b) => {
                let ka = val(a).cols();
                let kb = val(b).cols();
                let n = g.rows();
                let k = ka + kb;
                if wants(a) {
                    let data = (0..n).flat_map(|r| g.data()[r * k..r * k + ka].to_vec()).collect();
                    acc(a, Tensor::new(val(a).shape().to_vec(), data).expect("concat grad"));
                }
                if wants(b) {
                    let data = (0..n).flat_map(|r| g.data()[r * k + ka..(r + 1) * k].to_vec()).collect();
                    acc(b, Tensor::new(val(b).shape().to_vec(), data).expect("concat grad"));
                }
            }
            Op::Column(a, j) => {
                let src = val(a);
                let k = src.cols();
                let mut out = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    out.data_mut()[r * k + j] = g.data()[r];
                }
                acc(a, out);
            }
        }
    }
}

/// Gradients of one scalar output with respect to every registered parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    params: Vec<Var>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        self.params
            .iter()
            .position(|p| *p == v)
            .map(|i| &self.grads[i])
            .ok_or(Error::ForeignVar)
    }

    /// Gradients in parameter registration order.
    pub fn all(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}
