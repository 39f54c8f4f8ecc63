use ipred::cvae::{Cvae, ModelConfig};
use ipred::diffcore::Tensor;
use ipred::rng::SeedStream;
use ipred::synthdata::{generate_dataset, DatasetConfig, RoundaboutSpec};
use ipred::training::{moving_average, TrainConfig};

/// Squared error of the decoded posterior mean, in model units.
fn reconstruction(model: &Cvae, ex: &ipred::cvae::Example) -> f64 {
    let (mu, _) = model.encode_example(ex).unwrap();
    let x = model.embed_condition(&ex.features).unwrap();
    let d = model.decode(&x, ex.features.intention, &mu).unwrap();
    let target = ex.features.displacement(&ex.future);
    let diff: Vec<f64> = d.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
    Tensor::vector(diff).data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

#[test]
fn single_example_overfits() {
    let d = generate_dataset(&RoundaboutSpec::default(), &DatasetConfig { n_cases: 10, ..DatasetConfig::default() })
        .unwrap();
    let ex = d.train[d.train.len() / 2].example.clone();
    let mut model = Cvae::new(ModelConfig::default(), &SeedStream::new(0)).unwrap();
    let cfg = TrainConfig { epochs: 300, batch_size: 1, lr: 1e-3, lr_decay: 1.0, val_fraction: 0.0, seed: 0 };
    let curve = model.train(std::slice::from_ref(&ex), &cfg).unwrap();
    let r = reconstruction(&model, &ex);
    assert!(r < 1e-3, "reconstruction {r}, last loss {:?}", curve.last());
}

#[test]
fn smoothed_loss_does_not_increase() {
    let d = generate_dataset(&RoundaboutSpec::default(), &DatasetConfig { n_cases: 20, ..DatasetConfig::default() })
        .unwrap();
    let mut model = Cvae::new(ModelConfig::default(), &SeedStream::new(0)).unwrap();
    let curve = model.train(&d.train_examples(), &TrainConfig { epochs: 30, ..TrainConfig::default() }).unwrap();
    let train: Vec<f64> = curve.iter().map(|e| e.train).collect();
    let smooth = moving_average(&train, 5);
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0], "{smooth:?}");
    }
}
