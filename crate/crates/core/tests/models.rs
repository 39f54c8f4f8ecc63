use ipred::baselines::{dropout_mask, mc_dropout_predict, DropoutConfig, EnsembleModel, Regressor};
use ipred::cvae::{elbo_loss, kl_divergence, reparameterize, Cvae, FeatureVector, ModelConfig, ENV_DIM, JOINT_DIM};
use ipred::diffcore::Tensor;
use ipred::intention::IntentionOneHot;
use ipred::metrics::{mse, nll};
use ipred::rng::SeedStream;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn random_fv(seed: u64) -> FeatureVector {
    let mut rng = SeedStream::new(seed).rng();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    FeatureVector::new(
        Tensor::matrix(5, JOINT_DIM, draw(5 * JOINT_DIM)).unwrap(),
        Tensor::vector(draw(ENV_DIM)),
        IntentionOneHot::new(2).unwrap(),
    )
    .unwrap()
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = SeedStream::new(5).rng();
    for _ in 0..50 {
        let mu: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            // log q(z) - log p(z) at z ~ q
            let mut term = 0.0;
            for k in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mu[k] + (0.5 * lv[k]).exp() * e;
                term += -0.5 * lv[k] - 0.5 * e * e + 0.5 * z * z;
            }
            acc += term;
        }
        let mc = acc / n as f64;
        let exact = kl_divergence(&mu, &lv);
        assert!((mc - exact).abs() <= 0.02 * exact, "mc {mc} exact {exact} mu {mu:?} lv {lv:?}");
    }
}

#[test]
fn kl_worked_value() {
    assert!((kl_divergence(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-15);
    assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}

#[test]
fn decoder_variance_grows_with_latent_weights() {
    let cfg = ModelConfig::default();
    let fv = random_fv(1);
    let mut totals = Vec::new();
    for k in [0.0, 0.5, 1.0, 2.0] {
        let mut m = Cvae::new(cfg.clone(), &SeedStream::new(3)).unwrap();
        let id = m.params.id("decoder.0.w").unwrap();
        let w = m.params.get_mut(id);
        let cols = w.cols();
        for r in 0..w.rows() {
            for c in cols - cfg.latent_dim..cols {
                w.data_mut()[r * cols + c] *= k;
            }
        }
        m.mark_trained();
        let r = m.predict(&fv, 500, 11).unwrap();
        totals.push(r.variance.iter().sum::<f64>());
    }
    assert_eq!(totals[0], 0.0);
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
}

#[test]
fn inverted_dropout_keeps_expectation() {
    let mut rng = SeedStream::new(6).rng();
    for rate in [0.1, 0.3, 0.5] {
        let m = dropout_mask(&[100_000], rate, &mut rng);
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "rate {rate}: {mean}");
    }
}

#[test]
fn linear_dropout_variance_grows_with_rate() {
    // y = w . (x * mask): variance is sum (w x)^2 * rate / (1 - rate)
    let w = [0.7, -1.2, 0.4, 2.0];
    let x = [1.0, 0.5, -2.0, 0.3];
    let mut rng = SeedStream::new(8).rng();
    let mut last = -1.0;
    for rate in [0.0, 0.1, 0.2, 0.4, 0.6] {
        let n = 50_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| {
                let m = dropout_mask(&[4], rate, &mut rng);
                (0..4).map(|k| w[k] * x[k] * m.data()[k]).sum()
            })
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = w.iter().zip(&x).map(|(a, b)| (a * b).powi(2)).sum::<f64>() * rate / (1.0 - rate);
        assert!((var - expected).abs() <= 0.03 * expected + 1e-12, "rate {rate}: {var} vs {expected}");
        assert!(var >= last);
        last = var;
    }
}

#[test]
fn regressor_dropout_spread_grows_with_rate() {
    let mut m =
        Regressor::new(ModelConfig { use_intention: false, ..ModelConfig::default() }, 0.0, &SeedStream::new(2))
            .unwrap();
    m.mark_trained();
    let fv = random_fv(4);
    let spread: Vec<f64> = [0.0, 0.1, 0.3, 0.5]
        .iter()
        .map(|&r| m.forward_passes(&fv, r, 4000, 1).unwrap().variance.iter().sum())
        .collect();
    assert_eq!(spread[0], 0.0);
    assert!(spread.windows(2).all(|w| w[0] < w[1]), "{spread:?}");
    let cfg = DropoutConfig { rate: 0.0, n_forward_passes: 3 };
    assert!(mc_dropout_predict(&m, &cfg, &fv, 0).unwrap().variance.iter().all(|&v| v == 0.0));
}

#[test]
fn ensemble_variance_ignores_member_order() {
    let cfg = ModelConfig { use_intention: false, ..ModelConfig::default() };
    let members: Vec<Regressor> = (0..4)
        .map(|k| {
            let mut r = Regressor::new(cfg.clone(), 0.0, &SeedStream::new(k)).unwrap();
            r.mark_trained();
            r
        })
        .collect();
    let fv = random_fv(9);
    let a = EnsembleModel { members: members.clone() }.predict(&fv, 8).unwrap();
    let mut reversed = members;
    reversed.reverse();
    let b = EnsembleModel { members: reversed }.predict(&fv, 8).unwrap();
    for (x, y) in a.variance.iter().zip(&b.variance) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
    for (x, y) in a.mean.iter().zip(&b.mean) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn latent_sample_identity(mu in vec_of(3), lv in vec_of(3), eps in vec_of(3)) {
        let s = reparameterize(&Tensor::vector(mu.clone()), &Tensor::vector(lv.clone()), &Tensor::vector(eps.clone())).unwrap();
        for k in 0..3 {
            prop_assert_eq!(s.z.data()[k], mu[k] + (0.5 * lv[k]).exp() * eps[k]);
        }
    }

    #[test]
    fn elbo_and_kl_non_negative(y in vec_of(6), yh in vec_of(6), mu in vec_of(2), lv in vec_of(2), beta in 0.0f64..2.0) {
        let t = elbo_loss(&Tensor::vector(y), &Tensor::vector(yh), &Tensor::vector(mu), &Tensor::vector(lv), beta).unwrap();
        prop_assert!(t.kl >= 0.0);
        prop_assert!(t.reconstruction >= 0.0);
        prop_assert!(t.total >= 0.0);
    }

    #[test]
    fn metrics_ignore_sample_order(y in vec_of(4), samples in prop::collection::vec(vec_of(4), 2..8), rot in 0usize..8) {
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let mut shuffled = refs.clone();
        shuffled.rotate_left(rot % refs.len());
        shuffled.reverse();
        let (m1, m2) = (mse(&y, &refs).unwrap(), mse(&y, &shuffled).unwrap());
        prop_assert!(m1 >= 0.0);
        prop_assert!((m1 - m2).abs() <= 1e-12 * m1.max(1.0));
        let (n1, n2) = (nll(&y, &refs).unwrap(), nll(&y, &shuffled).unwrap());
        prop_assert!(n1.is_finite());
        prop_assert!((n1 - n2).abs() <= 1e-9 * n1.abs().max(1.0));
    }

    #[test]
    fn duplicating_samples_changes_nothing(y in vec_of(4), samples in prop::collection::vec(vec_of(4), 2..8)) {
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let doubled: Vec<&[f64]> = refs.iter().chain(refs.iter()).copied().collect();
        let (m1, m2) = (mse(&y, &refs).unwrap(), mse(&y, &doubled).unwrap());
        prop_assert!((m1 - m2).abs() <= 1e-12 * m1.max(1.0));
        let (n1, n2) = (nll(&y, &refs).unwrap(), nll(&y, &doubled).unwrap());
        prop_assert!((n1 - n2).abs() <= 1e-9 * n1.abs().max(1.0));
    }
}
