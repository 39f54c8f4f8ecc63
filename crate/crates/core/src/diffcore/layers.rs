use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

/// Uniform in `±sqrt(1 / fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Fully connected layer `act(x Wᵀ + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), uniform_init(&[out_dim, in_dim], in_dim, rng));
        let bias = store.add(format!("{name}.b"), uniform_init(&[out_dim], in_dim, rng));
        DenseLayer { weight, bias, in_dim, out_dim, activation }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.in_dim {
            return Err(Error::Shape(format!("dense layer expects {} inputs, got {cols}", self.in_dim)));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul_t(x, w);
        let h = g.add_row(h, b);
        Ok(match self.activation {
            Activation::Tanh => g.tanh(h),
            Activation::Sigmoid => g.sigmoid(h),
            Activation::Identity => h,
        })
    }
}

/// Evaluates a dense layer on a batch without keeping a tape around.
pub fn dense_forward(layer: &DenseLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, store, xv)?;
    Ok(g.value(y).clone())
}

/// A stack of dense layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. Hidden layers use `hidden`, the last one
    /// `output`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    /// Applies the layers; `between` runs on each hidden activation (used for
    /// dropout masks).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        between: &mut dyn FnMut(&mut Graph, Var) -> Var,
    ) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < n {
                x = between(g, x);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with(g, store, x, &mut |_, v| v)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

/// LSTM cell with input, forget, candidate and output gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    input: Gate,
    forget: Gate,
    cell: Gate,
    output: Gate,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = in_dim + hidden;
        let mut gate = |g: &str| Gate {
            w: store.add(format!("{name}.{g}.w"), uniform_init(&[hidden, in_dim], fan_in, rng)),
            u: store.add(format!("{name}.{g}.u"), uniform_init(&[hidden, hidden], fan_in, rng)),
            b: store.add(format!("{name}.{g}.b"), uniform_init(&[hidden], fan_in, rng)),
        };
        let input = gate("i");
        let forget = gate("f");
        let cell = gate("g");
        let output = gate("o");
        LstmCell { input, forget, cell, output, in_dim, hidden }
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, gate: Gate, x: Var, h: Var) -> Var {
        let w = g.param(store, gate.w);
        let u = g.param(store, gate.u);
        let b = g.param(store, gate.b);
        let a = g.matmul_t(x, w);
        let r = g.matmul_t(h, u);
        let s = g.add(a, r);
        g.add_row(s, b)
    }

    /// One step. `x: [B, in]`, `h, c: [B, hidden]`; returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (xc, hc) = (g.value(x).cols(), g.value(h).cols());
        if xc != self.in_dim || hc != self.hidden || g.value(c).cols() != self.hidden {
            return Err(Error::Shape(format!(
                "lstm expects input {} and state {}, got {xc} and {hc}",
                self.in_dim, self.hidden
            )));
        }
        let i = self.gate(g, store, self.input, x, h);
        let i = g.sigmoid(i);
        let f = self.gate(g, store, self.forget, x, h);
        let f = g.sigmoid(f);
        let cand = self.gate(g, store, self.cell, x, h);
        let cand = g.tanh(cand);
        let o = self.gate(g, store, self.output, x, h);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_new = g.add(keep, write);
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed);
        Ok((h_new, c_new))
    }

    /// Runs the cell over a sequence from zero state; returns the last hidden
    /// state.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Var> {
        let batch = xs
            .first()
            .map(|&x| g.value(x).rows())
            .ok_or_else(|| Error::InvalidArgument("lstm needs at least one step".into()))?;
        let mut h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[batch, self.hidden]));
        for &x in xs {
            (h, c) = self.step(g, store, x, h, c)?;
        }
        Ok(h)
    }
}

/// Plain-value LSTM step for inspection and tests.
pub fn lstm_step(cell: &LstmCell, store: &ParamStore, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (xv, hv, cv) = (g.input(x.clone()), g.input(h.clone()), g.input(c.clone()));
    let (h2, c2) = cell.step(&mut g, store, xv, hv, cv)?;
    Ok((g.value(h2).clone(), g.value(c2).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn dense_shape_check() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(1).rng();
        let layer = DenseLayer::new(&mut store, "d", 3, 2, Activation::Tanh, &mut rng);
        assert!(dense_forward(&layer, &store, &Tensor::vector(vec![1.0, 2.0])).is_err());
        let y = dense_forward(&layer, &store, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn init_within_bound() {
        let mut rng = SeedStream::new(2).rng();
        let t = uniform_init(&[64, 16], 16, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn zero_weights_lstm_step() {
        // all-zero parameters: gates are 0.5, candidate 0, so c' = 0.5 c
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(3).rng();
        let cell = LstmCell::new(&mut store, "l", 2, 3, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let c = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let (h2, c2) = lstm_step(&cell, &store, &Tensor::vector(vec![0.3, 0.4]), &Tensor::zeros(&[3]), &c).unwrap();
        for k in 0..3 {
            assert!((c2.data()[k] - 0.5 * c.data()[k]).abs() < 1e-15);
            assert!((h2.data()[k] - 0.5 * c2.data()[k].tanh()).abs() < 1e-15);
        }
    }
}
