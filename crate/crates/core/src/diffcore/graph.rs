//! Reverse-mode differentiation over an explicit tape.
//!
//! Every value is a matrix (vectors are single rows). Nodes are appended in
//! evaluation order, so walking the tape backwards visits each node after
//! all of its consumers.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    /// `x · wᵀ` with `x: [B, in]`, `w: [out, in]`.
    MatMulT(Var, Var),
    /// Adds a `[1, n]` row to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    if t.shape().len() == 2 {
        t
    } else {
        Tensor::raw(vec![r, c], t.into_data())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(t), Op::Input, false)
    }

    /// Input whose gradient is wanted (used for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(t), Op::Input, true)
    }

    /// Binds a stored parameter. Binding the same parameter twice returns the
    /// same node, so its gradient accumulates over every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(as_matrix(store.get(id).clone()), Op::Param, true);
        self.param_vars[idx] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (b, k) = self.dims(x);
        let (o, k2) = self.dims(w);
        assert_eq!(k, k2, "matmul_t: inner dimensions {k} vs {k2}");
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let xr = &xs[r * k..(r + 1) * k];
            for c in 0..o {
                out[r * o + c] = dot(xr, &ws[c * k..(c + 1) * k]);
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(Tensor::raw(vec![b, o], out), Op::MatMulT(x, w), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (b, n) = self.dims(x);
        assert_eq!(self.dims(row), (1, n), "add_row: bias shape");
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in 0..b {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(Tensor::raw(vec![b, n], out), Op::AddRow(x, row), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "elementwise op on mismatched shapes");
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::raw(vec![r, c], out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, rows, "concat: row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::raw(vec![rows, total], out), Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.dims(x);
        assert!(len > 0 && start + len <= cols, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(x);
        self.push(Tensor::raw(vec![rows, len], out), Op::Slice(x, start, len), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::raw(vec![1, 1], vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::raw(vec![1, 1], vec![m]), Op::Mean(x), ng)
    }

    /// Gradients of the scalar `root` with respect to every node that needs
    /// one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self.param_vars.iter().enumerate().filter_map(|(idx, v)| v.map(|v| (idx, v))).collect();
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|g| Tensor::raw(self.nodes[i].value.shape().to_vec(), g)))
                .collect(),
            params,
        })
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMulT(x, w) => {
                let (b, k) = self.dims(*x);
                let o = self.dims(*w).0;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                acc(*x, &mut |gx| {
                    for r in 0..b {
                        let gr = &mut gx[r * k..(r + 1) * k];
                        for c in 0..o {
                            axpy(dy[r * o + c], &ws[c * k..(c + 1) * k], gr);
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..b {
                        let xr = &xs[r * k..(r + 1) * k];
                        for c in 0..o {
                            axpy(dy[r * o + c], xr, &mut gw[c * k..(c + 1) * k]);
                        }
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = self.dims(*row).1;
                acc(*x, &mut |g| add_into(g, dy));
                acc(*row, &mut |g| {
                    for chunk in dy.chunks(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((g, d), bx) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * bx;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), ax) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * ax;
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((g, d), yv) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((g, d), yv) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * yv * (1.0 - yv);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |g| {
                for ((g, d), yv) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * yv;
                }
            }),
            Op::Scale(x, k) => acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += k * d)),
            Op::AddScalar(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((g, d), xx) in g.iter_mut().zip(dy).zip(xv) {
                        *g += 2.0 * xx * d;
                    }
                })
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(p, &mut |g| {
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &dy[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(x, start, len) => {
                let cols = self.dims(*x).1;
                acc(*x, &mut |g| {
                    for (r, dr) in dy.chunks(*len).enumerate() {
                        add_into(&mut g[r * cols + start..r * cols + start + len], dr);
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n))
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it lies on a path to the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients aligned with the parameters of `store`, shaped like them.
    /// Parameters not used in the graph get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for &(idx, v) in &self.params {
            if let (Some(slot), Some(g)) = (out.get_mut(idx), self.wrt(v)) {
                slot.data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            s[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (g, d) in g.iter_mut().zip(d) {
        *g += d;
    }
}
