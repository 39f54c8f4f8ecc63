//! Sample-based error metrics and multi-method evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{mc_dropout_predict, DropoutConfig, EnsembleModel, Regressor};
use crate::cvae::{Cvae, Example, Normalizer, PredictionResult};
use crate::error::{Error, Result};
use crate::intention::DEFAULT_PROB_THRESHOLD;
use crate::rng::{config_digest, SeedStream};

/// Lower bound on fitted variances in [`nll`].
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Mean over samples of the per-dimension mean squared error.
pub fn mse(y: &[f64], samples: &[&[f64]]) -> Result<f64> {
    check(y, samples, 1)?;
    let d = y.len() as f64;
    let total: f64 = samples.iter().map(|s| s.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d).sum();
    Ok(total / samples.len() as f64)
}

/// Gaussian negative log-likelihood of `y` under a per-dimension fit to the
/// samples (sample mean, population variance), averaged over dimensions.
/// Constant terms are dropped.
pub fn nll(y: &[f64], samples: &[&[f64]]) -> Result<f64> {
    check(y, samples, 2)?;
    let n = samples.len() as f64;
    let mut total = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let mu = samples.iter().map(|s| s[k]).sum::<f64>() / n;
        let var = (samples.iter().map(|s| (s[k] - mu).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
        total += 0.5 * var.ln() + (yk - mu).powi(2) / (2.0 * var);
    }
    Ok(total / y.len() as f64)
}

fn check(y: &[f64], samples: &[&[f64]], min: usize) -> Result<()> {
    if samples.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} samples, got {}", samples.len())));
    }
    if y.is_empty() || samples.iter().any(|s| s.len() != y.len()) {
        return Err(Error::Shape("samples and target differ in size".into()));
    }
    Ok(())
}

/// Anything that can sample joint futures for a test window.
pub trait Predictor {
    fn name(&self) -> &str;
    fn predict(&self, ex: &Example, n_samples: usize, seed: u64) -> Result<PredictionResult>;
}

impl Predictor for Cvae {
    fn name(&self) -> &str {
        self.method_tag()
    }

    /// Intention models sample across every plausible branch of car B's
    /// belief.
    fn predict(&self, ex: &Example, n_samples: usize, seed: u64) -> Result<PredictionResult> {
        let (r, _) =
            self.predict_across_intentions(&ex.features, &ex.belief, n_samples, seed, DEFAULT_PROB_THRESHOLD)?;
        Ok(r)
    }
}

impl Predictor for EnsembleModel {
    fn name(&self) -> &str {
        "mlp-ensemble"
    }

    fn predict(&self, ex: &Example, n_samples: usize, _seed: u64) -> Result<PredictionResult> {
        EnsembleModel::predict(self, &ex.features, n_samples)
    }
}

/// A dropout-trained regressor queried with stochastic passes.
#[derive(Debug, Clone)]
pub struct McDropout {
    pub model: Regressor,
}

impl Predictor for McDropout {
    fn name(&self) -> &str {
        "mc-dropout"
    }

    fn predict(&self, ex: &Example, n_samples: usize, seed: u64) -> Result<PredictionResult> {
        let cfg = DropoutConfig { rate: self.model.dropout, n_forward_passes: n_samples };
        mc_dropout_predict(&self.model, &cfg, &ex.features, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodStats>,
    pub case_count: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Per-case scores of one method, in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub mse: Vec<f64>,
    pub nll: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Seed shared by every method for test case `i`.
pub fn case_seed(seed: u64, i: usize) -> u64 {
    SeedStream::new(seed).derive("case").index(i as u64).seed()
}

/// Scores one method on every case. Predictions and ground truth are
/// mapped back to world coordinates first.
pub fn score_cases(
    method: &dyn Predictor,
    test: &[Example],
    n_samples: usize,
    seed: u64,
    normalizer: &Normalizer,
) -> Result<CaseScores> {
    let mut out = CaseScores { mse: Vec::with_capacity(test.len()), nll: Vec::with_capacity(test.len()) };
    for (i, ex) in test.iter().enumerate() {
        let pred = method.predict(ex, n_samples, case_seed(seed, i))?;
        let y = normalizer.joint_to_world(&ex.future);
        let world: Vec<_> = pred.samples.iter().map(|s| normalizer.joint_to_world(s)).collect();
        let refs: Vec<&[f64]> = world.iter().map(|s| s.data()).collect();
        out.mse.push(mse(y.data(), &refs)?);
        out.nll.push(nll(y.data(), &refs)?);
    }
    Ok(out)
}

/// Scores every method on the same cases with the same per-case seeds.
pub fn evaluate(
    methods: &[&dyn Predictor],
    test: &[Example],
    n_samples: usize,
    seed: u64,
    normalizer: &Normalizer,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut stats = Vec::with_capacity(methods.len());
    for m in methods {
        let s = score_cases(*m, test, n_samples, seed, normalizer)?;
        let (mse_mean, mse_std) = mean_std(&s.mse);
        let (nll_mean, nll_std) = mean_std(&s.nll);
        log::info!("{}: mse {mse_mean:.4} nll {nll_mean:.4}", m.name());
        stats.push(MethodStats { method: m.name().to_string(), mse_mean, mse_std, nll_mean, nll_std });
    }
    let names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    Ok(EvalReport {
        methods: stats,
        case_count: test.len(),
        n_samples,
        seed,
        config_digest: config_digest(&(names, test.len(), n_samples, seed)),
    })
}

pub fn display_name(method: &str) -> &str {
    match method {
        "proposed" => "CVAE with intention",
        "cvae-noI" => "CVAE without intention",
        "mlp-ensemble" => "MLP ensemble",
        "mc-dropout" => "MC dropout",
        other => other,
    }
}

impl EvalReport {
    pub fn stats(&self, method: &str) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Aligned text table, one row per method.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .methods
            .iter()
            .map(|m| {
                [
                    display_name(&m.method).to_string(),
                    format!("{:.2} ± {:.2}", m.mse_mean, m.mse_std),
                    format!("{:.2} ± {:.2}", m.nll_mean, m.nll_std),
                ]
            })
            .collect();
        let width =
            |i: usize, head: &str| cells.iter().map(|c| c[i].chars().count()).chain([head.len()]).max().unwrap_or(0);
        let (w0, w1, w2) = (width(0, "Method"), width(1, "MSE"), width(2, "NLL"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<w0$}  {:<w1$}  {:<w2$}", "Method", "MSE", "NLL");
        let _ = writeln!(s, "{}", "-".repeat(w0 + w1 + w2 + 4));
        for c in &cells {
            let pad = |t: &str, w: usize| format!("{t}{}", " ".repeat(w - t.chars().count()));
            let _ = writeln!(s, "{}  {}  {}", pad(&c[0], w0), pad(&c[1], w1), c[2]);
        }
        let _ = writeln!(s, "({} test windows, {} samples each, seed {})", self.case_count, self.n_samples, self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.0], &[&[1.0], &[-1.0]]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0], &[&[1.0, 2.0]]).unwrap(), 0.0);
        assert!(mse(&[1.0], &[]).is_err());
    }

    #[test]
    fn nll_examples() {
        // y = mu, var = 1
        assert!(nll(&[0.0], &[&[1.0], &[-1.0]]).unwrap().abs() < 1e-15);
        // y = mu, var = e^2
        let e = std::f64::consts::E;
        assert!((nll(&[0.0], &[&[e], &[-e]]).unwrap() - 1.0).abs() < 1e-12);
        // y - mu = 1, var = 1
        assert!((nll(&[1.0], &[&[1.0], &[-1.0]]).unwrap() - 0.5).abs() < 1e-15);
        assert!(nll(&[0.0], &[&[0.0]]).is_err());
        assert!(nll(&[0.0], &[&[0.0], &[0.0]]).unwrap().is_finite());
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = EvalReport {
            methods: vec![MethodStats {
                method: "proposed".into(),
                mse_mean: 0.45,
                mse_std: 0.11,
                nll_mean: 0.83,
                nll_std: 0.26,
            }],
            case_count: 3,
            n_samples: 10,
            seed: 1,
            config_digest: "x".into(),
        };
        let t = r.to_table();
        assert!(t.contains("CVAE with intention  0.45 ± 0.11  0.83 ± 0.26"), "{t}");
        assert_eq!(t.lines().count(), 4);
    }
}
