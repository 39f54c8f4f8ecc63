//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that near-zero gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences for every parameter entry.
///
/// `loss` must be deterministic in the store, since it is rebuilt twice per
/// entry.
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    let analytic = g.backward(root)?.for_params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(&mut g, s)?;
        Ok(g.value(r).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for (k, id) in store.ids().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[k].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]", store.name(id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::layers::{Activation, DenseLayer, LstmCell};
    use crate::diffcore::tensor::Tensor;
    use crate::rng::SeedStream;

    #[test]
    fn dense_and_lstm_pass() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(11).rng();
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng);
        let head = DenseLayer::new(&mut store, "head", 3, 2, Activation::Tanh, &mut rng);
        let xs = [vec![0.1, -0.3, 0.4, 0.2], vec![-0.5, 0.6, 0.0, 0.9]];
        let report = check_param_gradients(&store, DEFAULT_STEP, |g, s| {
            let steps: Vec<Var> = xs.iter().map(|x| g.input(Tensor::matrix(2, 2, x.clone()).unwrap())).collect();
            let h = cell.run(g, s, &steps)?;
            let y = head.forward(g, s, h)?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
