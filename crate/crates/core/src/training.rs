//! Minibatch training loop shared by the CVAE and the baselines.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Share of examples held out for the validation loss.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 64, lr: 3e-3, lr_decay: 0.98, val_fraction: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument("need lr > 0 and 0 < lr_decay <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

pub fn write_loss_csv<W: Write>(mut w: W, curve: &[EpochLoss]) -> Result<()> {
    writeln!(w, "epoch,train,val")?;
    for e in curve {
        match e.val {
            Some(v) => writeln!(w, "{},{},{}", e.epoch, e.train, v)?,
            None => writeln!(w, "{},{},", e.epoch, e.train)?,
        }
    }
    Ok(())
}

/// Scalar nodes of one minibatch objective.
pub struct BatchLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
}

/// Splits `0..n` into shuffled train and validation index sets.
pub fn split_indices(n: usize, val_fraction: f64, stream: &SeedStream) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream.rng());
    let n_val = ((n as f64 * val_fraction).floor() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Runs Adam over minibatches of example indices and returns the per-epoch
/// mean losses. `batch_loss` builds the objective for one batch; the rng it
/// receives is seeded per batch, so runs are reproducible.
pub fn fit<F>(
    store: &mut ParamStore,
    n_examples: usize,
    cfg: &TrainConfig,
    stream: &SeedStream,
    mut batch_loss: F,
) -> Result<Vec<EpochLoss>>
where
    F: FnMut(&mut Graph, &ParamStore, &[usize], &mut Rng) -> Result<BatchLoss>,
{
    cfg.validate()?;
    if n_examples == 0 {
        return Err(Error::Dataset("no training examples".into()));
    }
    let (mut train, val) = split_indices(n_examples, cfg.val_fraction, &stream.derive("split"));
    let mut adam = Adam::new(store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ep = stream.derive("epoch").index(epoch as u64);
        train.shuffle(&mut ep.derive("shuffle").rng());
        let mut sum = 0.0;
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            let mut rng = ep.derive("batch").index(b as u64).rng();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, store, batch, &mut rng)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    reconstruction: g.value(loss.reconstruction).item(),
                    kl: loss.kl.map_or(0.0, |k| g.value(k).item()),
                });
            }
            let grads = g.backward(loss.total)?.for_params(store);
            adam.step(store, &grads)?;
            sum += total * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;

        let val_loss = if val.is_empty() {
            None
        } else {
            let mut rng = stream.derive("val").rng();
            let mut vsum = 0.0;
            for batch in val.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let loss = batch_loss(&mut g, store, batch, &mut rng)?;
                vsum += g.value(loss.total).item() * batch.len() as f64;
            }
            Some(vsum / val.len() as f64)
        };
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        curve.push(EpochLoss { epoch, train: train_loss, val: val_loss });
        adam.config.lr *= cfg.lr_decay;
    }
    Ok(curve)
}

/// Trailing moving average over the last `w` values (fewer at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    assert!(w > 0, "window must be positive");
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn split_keeps_one_training_example() {
        let (t, v) = split_indices(1, 0.5, &SeedStream::new(0));
        assert_eq!((t.len(), v.len()), (1, 0));
        let (t, v) = split_indices(100, 0.1, &SeedStream::new(0));
        assert_eq!((t.len(), v.len()), (90, 10));
    }

    #[test]
    fn fits_a_scalar_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0));
        let cfg = TrainConfig { epochs: 3000, lr: 0.05, lr_decay: 1.0, val_fraction: 0.0, ..Default::default() };
        let curve = fit(&mut store, 1, &cfg, &SeedStream::new(1), |g, s, _, _| {
            let v = g.param(s, p);
            let sh = g.add_scalar(v, -1.0);
            let sq = g.square(sh);
            let total = g.sum(sq);
            Ok(BatchLoss { total, reconstruction: total, kl: None })
        })
        .unwrap();
        assert!(curve.last().unwrap().train < 1e-8);
        assert!((store.get(p).item() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[3.0, 1.0, 2.0, 6.0], 2), vec![3.0, 2.0, 1.5, 4.0]);
    }
}
