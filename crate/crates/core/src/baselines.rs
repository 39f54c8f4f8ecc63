//! Comparison methods: a CVAE without intention input, a bootstrap ensemble
//! of regressors and Monte Carlo dropout.
//!
//! The regressors share the CVAE's condition embedding and use an MLP shaped
//! like its decoder, mapping the condition straight to the future.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    anchored, intention_batch, rows_input, ConditionEmbedder, Cvae, Example, FeatureVector, ModelConfig,
    PredictionResult, JOINT_DIM,
};
use crate::diffcore::{Activation, Checkpoint, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::training::{fit, BatchLoss, EpochLoss, TrainConfig};

pub const DEFAULT_MEMBERS: usize = 10;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// The CVAE with the intention input removed from encoder and decoder.
pub fn train_cvae_no_intention(
    data: &[Example],
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Cvae, Vec<EpochLoss>)> {
    let config = ModelConfig { use_intention: false, ..config.clone() };
    let mut model = Cvae::new(config, &SeedStream::new(train.seed).derive("init"))?;
    let curve = model.train(data, train)?;
    Ok((model, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub n_forward_passes: usize,
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {}", self.rate)));
        }
        if self.n_forward_passes == 0 {
            return Err(Error::InvalidArgument("need at least one forward pass".into()));
        }
        Ok(())
    }
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
struct RegressorNet {
    embed: ConditionEmbedder,
    mlp: Mlp,
}

/// Deterministic regressor `condition -> future` (as a displacement from
/// the last observed position), optionally with dropout
/// after each hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub config: ModelConfig,
    pub dropout: f64,
    pub params: ParamStore,
    net: RegressorNet,
    trained: bool,
}

impl Regressor {
    pub fn new(config: ModelConfig, dropout: f64, init: &SeedStream) -> Result<Self> {
        config.validate()?;
        DropoutConfig { rate: dropout, n_forward_passes: 1 }.validate()?;
        let mut rng = init.rng();
        let mut params = ParamStore::new();
        let embed = ConditionEmbedder::new(&mut params, "embed", &config, &mut rng);
        let mut dims = vec![config.condition_dim() + config.intention_dim()];
        dims.extend(&config.decoder_hidden);
        dims.push(config.output_dim());
        let mlp = Mlp::new(&mut params, "mlp", &dims, Activation::Tanh, Activation::Identity, &mut rng);
        Ok(Regressor { config, dropout, params, net: RegressorNet { embed, mlp }, trained: false })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fvs: &[&FeatureVector],
        rate: f64,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let x = self.net.embed.forward(g, store, fvs)?;
        let x = if self.config.use_intention {
            let cs: Vec<_> = fvs.iter().map(|f| f.intention).collect();
            let c = intention_batch(g, &cs);
            g.concat(&[x, c])
        } else {
            x
        };
        match rng {
            Some(rng) if rate > 0.0 => self.net.mlp.forward_with(g, store, x, &mut |g, h| {
                let shape = g.value(h).shape().to_vec();
                let m = g.input(dropout_mask(&shape, rate, rng));
                g.mul(h, m)
            }),
            _ => self.net.mlp.forward(g, store, x),
        }
    }

    fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Example], rng: &mut Rng) -> Result<BatchLoss> {
        let fvs: Vec<&FeatureVector> = batch.iter().map(|e| &e.features).collect();
        let y_hat = self.forward(g, store, &fvs, self.dropout, Some(rng))?;
        let ds: Vec<Tensor> = batch.iter().map(|e| e.features.displacement(&e.future)).collect();
        let y = rows_input(g, &ds.iter().collect::<Vec<_>>());
        let d = g.sub(y_hat, y);
        let sq = g.square(d);
        let total = g.mean(sq);
        Ok(BatchLoss { total, reconstruction: total, kl: None })
    }

    /// Trains on `data[indices]` (indices may repeat).
    pub fn train_on(
        &mut self,
        data: &[Example],
        indices: &[usize],
        cfg: &TrainConfig,
        stream: &SeedStream,
    ) -> Result<Vec<EpochLoss>> {
        let shell = Regressor {
            config: self.config.clone(),
            dropout: self.dropout,
            params: ParamStore::new(),
            net: self.net.clone(),
            trained: false,
        };
        let curve = fit(&mut self.params, indices.len(), cfg, stream, |g, store, idx, rng| {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[indices[i]]).collect();
            shell.batch_loss(g, store, &batch, rng)
        })?;
        self.trained = true;
        Ok(curve)
    }

    /// Output without dropout, `[T2, 4]`.
    pub fn predict_mean(&self, fv: &FeatureVector) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let mut g = Graph::new();
        let y = self.forward(&mut g, &self.params, &[fv], 0.0, None)?;
        let d = Tensor::raw(vec![self.config.t2, JOINT_DIM], g.value(y).data().to_vec());
        Ok(anchored(d, &fv.anchor(self.config.t2)))
    }

    /// `n` stochastic passes with fresh masks at `rate`, whatever rate the
    /// model was trained with.
    pub fn forward_passes(&self, fv: &FeatureVector, rate: f64, n: usize, seed: u64) -> Result<PredictionResult> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        DropoutConfig { rate, n_forward_passes: n }.validate()?;
        let mut rng = SeedStream::new(seed).derive("dropout").rng();
        let fvs = vec![fv; n];
        let mut g = Graph::new();
        let y = self.forward(&mut g, &self.params, &fvs, rate, Some(&mut rng))?;
        let out = g.value(y);
        let anchor = fv.anchor(self.config.t2);
        PredictionResult::from_samples(
            (0..n)
                .map(|r| anchored(Tensor::raw(vec![self.config.t2, JOINT_DIM], out.row(r).to_vec()), &anchor))
                .collect(),
        )
    }

    fn load(config: ModelConfig, dropout: f64, params: &ParamStore, trained: bool) -> Result<Self> {
        let mut r = Regressor::new(config, dropout, &SeedStream::new(0))?;
        r.params.load_from(params)?;
        r.trained = trained;
        Ok(r)
    }
}

/// Bootstrap resample of `0..n`: `n` draws with replacement.
pub fn bootstrap_indices(n: usize, stream: &SeedStream) -> Vec<usize> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<Regressor>,
}

impl EnsembleModel {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    /// `n_samples` outputs cycling through the members, so the sample
    /// mean and variance equal the across-member ones when `n_samples` is a
    /// multiple of the member count.
    pub fn predict(&self, fv: &FeatureVector, n_samples: usize) -> Result<PredictionResult> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        let outs = self.members.iter().map(|m| m.predict_mean(fv)).collect::<Result<Vec<_>>>()?;
        PredictionResult::from_samples((0..n_samples).map(|s| outs[s % outs.len()].clone()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        for (k, m) in self.members.iter().enumerate() {
            for (name, t) in m.params.iter() {
                params.add(format!("member{k}/{name}"), t.clone());
            }
        }
        Checkpoint {
            method: "mlp-ensemble".into(),
            trained: self.members.iter().all(Regressor::is_trained),
            provenance: Default::default(),
            params,
        }
    }

    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        expect_method(ck, "mlp-ensemble")?;
        let mut members = Vec::new();
        loop {
            let prefix = format!("member{}/", members.len());
            let mut store = ParamStore::new();
            for (name, t) in ck.params.iter() {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    store.add(rest, t.clone());
                }
            }
            if store.is_empty() {
                break;
            }
            members.push(Regressor::load(config.clone(), 0.0, &store, ck.trained)?);
        }
        if members.len() < 2 {
            return Err(Error::Checkpoint("ensemble checkpoint holds fewer than two members".into()));
        }
        Ok(EnsembleModel { members })
    }
}

fn expect_method(ck: &Checkpoint, tag: &str) -> Result<()> {
    if ck.method != tag {
        return Err(Error::Checkpoint(format!("expected a `{tag}` checkpoint, found `{}`", ck.method)));
    }
    Ok(())
}

/// Trains `member_count` regressors, each on its own bootstrap resample.
pub fn train_mlp_ensemble(
    data: &[Example],
    member_count: usize,
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(EnsembleModel, Vec<Vec<EpochLoss>>)> {
    if member_count < 2 {
        return Err(Error::InvalidArgument(format!("an ensemble needs at least 2 members, got {member_count}")));
    }
    if data.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let root = SeedStream::new(train.seed).derive("mlp-ensemble");
    let mut members = Vec::with_capacity(member_count);
    let mut curves = Vec::with_capacity(member_count);
    for k in 0..member_count {
        let ms = root.index(k as u64);
        let idx = bootstrap_indices(data.len(), &ms.derive("bootstrap"));
        let mut m = Regressor::new(config.clone(), 0.0, &ms.derive("init"))?;
        curves.push(m.train_on(data, &idx, train, &ms.derive("train"))?);
        log::info!("ensemble member {}/{member_count} trained", k + 1);
        members.push(m);
    }
    Ok((EnsembleModel { members }, curves))
}

/// Regressor trained with dropout active after every hidden layer.
pub fn train_mc_dropout(
    data: &[Example],
    dropout: f64,
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Regressor, Vec<EpochLoss>)> {
    let root = SeedStream::new(train.seed).derive("mc-dropout");
    let mut m = Regressor::new(config.clone(), dropout, &root.derive("init"))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let curve = m.train_on(data, &idx, train, &root.derive("train"))?;
    Ok((m, curve))
}

/// Averages stochastic passes of a model trained with the same rate.
pub fn mc_dropout_predict(
    model: &Regressor,
    dropout: &DropoutConfig,
    fv: &FeatureVector,
    seed: u64,
) -> Result<PredictionResult> {
    dropout.validate()?;
    if model.dropout != dropout.rate {
        return Err(Error::InvalidArgument(format!(
            "model was trained with dropout {}, asked for {}",
            model.dropout, dropout.rate
        )));
    }
    model.forward_passes(fv, dropout.rate, dropout.n_forward_passes, seed)
}

pub fn dropout_checkpoint(model: &Regressor) -> Checkpoint {
    Checkpoint {
        method: "mc-dropout".into(),
        trained: model.is_trained(),
        provenance: Default::default(),
        params: model.params.clone(),
    }
}

pub fn dropout_from_checkpoint(config: &ModelConfig, rate: f64, ck: &Checkpoint) -> Result<Regressor> {
    expect_method(ck, "mc-dropout")?;
    Regressor::load(config.clone(), rate, &ck.params, ck.trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intention::IntentionOneHot;

    fn fv() -> FeatureVector {
        let past = Tensor::matrix(5, 4, (0..20).map(|i| 0.05 * i as f64).collect()).unwrap();
        FeatureVector::new(past, Tensor::vector(vec![0.1; 6]), IntentionOneHot::new(1).unwrap()).unwrap()
    }

    fn no_i() -> ModelConfig {
        ModelConfig { use_intention: false, ..ModelConfig::default() }
    }

    #[test]
    fn rates_validated() {
        assert!(DropoutConfig { rate: 1.0, n_forward_passes: 3 }.validate().is_err());
        assert!(Regressor::new(no_i(), 1.0, &SeedStream::new(0)).is_err());
        assert!(train_mlp_ensemble(&[], 1, &no_i(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_rate_passes_agree() {
        let mut m = Regressor::new(no_i(), 0.0, &SeedStream::new(1)).unwrap();
        m.mark_trained();
        let r = mc_dropout_predict(&m, &DropoutConfig { rate: 0.0, n_forward_passes: 5 }, &fv(), 3).unwrap();
        assert!(r.variance.iter().all(|&v| v == 0.0));
        assert_eq!(r.samples[0], m.predict_mean(&fv()).unwrap());
    }

    #[test]
    fn dropout_passes_are_seeded() {
        let mut m = Regressor::new(no_i(), 0.3, &SeedStream::new(2)).unwrap();
        m.mark_trained();
        let cfg = DropoutConfig { rate: 0.3, n_forward_passes: 8 };
        let a = mc_dropout_predict(&m, &cfg, &fv(), 9).unwrap();
        assert_eq!(a, mc_dropout_predict(&m, &cfg, &fv(), 9).unwrap());
        assert!(a.variance.iter().any(|&v| v > 0.0));
        assert!(mc_dropout_predict(&m, &DropoutConfig { rate: 0.1, ..cfg }, &fv(), 9).is_err());
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let mut m = Regressor::new(no_i(), 0.0, &SeedStream::new(4)).unwrap();
        m.mark_trained();
        let e = EnsembleModel { members: vec![m.clone(), m] };
        let r = e.predict(&fv(), 10).unwrap();
        assert!(r.variance.iter().all(|&v| v == 0.0));
        let back = EnsembleModel::from_checkpoint(&no_i(), &e.to_checkpoint()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let s = SeedStream::new(5);
        let a = bootstrap_indices(50, &s);
        assert_eq!(a, bootstrap_indices(50, &s));
        assert!(a.iter().all(|&i| i < 50));
    }
}
