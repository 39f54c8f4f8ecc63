//! Conditional variational autoencoder over joint two-car futures.
//!
//! The condition `x` is the last LSTM state over the past joint track
//! concatenated with an embedding of both cars' front vehicles. The
//! intention one-hot `c` for car B is appended to both encoder and decoder
//! inputs unless the model is configured without it.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Checkpoint, DenseLayer, Graph, LstmCell, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::intention::{IntentionOneHot, BRANCH_COUNT};
use crate::rng::{Rng, SeedStream};
use crate::training::{fit, BatchLoss, EpochLoss, TrainConfig};

/// Position features per time step: `(xA, yA, xB, yB)`.
pub const JOINT_DIM: usize = 4;
/// `(x, y, v)` of each car's front vehicle.
pub const ENV_DIM: usize = 6;

/// Maps world coordinates into the model frame: centred on the roundabout
/// and scaled by its radius. Speeds scale the same way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: Point2,
    pub scale: f64,
}

impl Normalizer {
    pub fn new(center: Point2, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !center.is_finite() {
            return Err(Error::InvalidArgument("normalizer needs finite center and scale > 0".into()));
        }
        Ok(Normalizer { center, scale })
    }

    pub fn to_model(&self, p: Point2) -> Point2 {
        p.sub(self.center).scale(1.0 / self.scale)
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        p.scale(self.scale).add(self.center)
    }

    pub fn speed_to_model(&self, v: f64) -> f64 {
        v / self.scale
    }

    /// Converts a flattened joint tensor `[.., 4]` back to world coordinates.
    pub fn joint_to_world(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for pair in out.data_mut().chunks_mut(2) {
            let w = self.to_world(Point2::new(pair[0], pair[1]));
            pair[0] = w.x;
            pair[1] = w.y;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `[T1, 4]`, oldest step first.
    pub past_joint: Tensor,
    /// `[6]`: front vehicle of A then of B.
    pub environment: Tensor,
    pub intention: IntentionOneHot,
}

impl FeatureVector {
    pub fn new(past_joint: Tensor, environment: Tensor, intention: IntentionOneHot) -> Result<Self> {
        if past_joint.shape().len() != 2 || past_joint.cols() != JOINT_DIM {
            return Err(Error::Shape(format!("past_joint must be [T1, 4], got {:?}", past_joint.shape())));
        }
        if environment.len() != ENV_DIM {
            return Err(Error::Shape(format!("environment must have 6 values, got {}", environment.len())));
        }
        if !past_joint.is_finite() || !environment.is_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(FeatureVector { past_joint, environment, intention })
    }

    pub fn t1(&self) -> usize {
        self.past_joint.rows()
    }

    /// Last observed joint position repeated over `t2` steps, flattened.
    pub fn anchor(&self, t2: usize) -> Tensor {
        let last = self.past_joint.row(self.t1() - 1);
        Tensor::raw(vec![t2 * JOINT_DIM], last.repeat(t2))
    }

    /// `future` relative to the last observed position, flattened.
    pub fn displacement(&self, future: &Tensor) -> Tensor {
        let anchor = self.anchor(future.len() / JOINT_DIM);
        Tensor::raw(vec![future.len()], future.data().iter().zip(anchor.data()).map(|(y, a)| y - a).collect())
    }
}

/// A training or test window: features, the ground-truth future `[T2, 4]`
/// and car B's inferred branch belief at the window's present time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: FeatureVector,
    pub future: Tensor,
    pub belief: [f64; BRANCH_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub t1: usize,
    pub t2: usize,
    pub dt: f64,
    pub lstm_hidden: usize,
    pub env_embed: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub beta: f64,
    pub use_intention: bool,
    /// Squared reconstruction errors in model units are multiplied by
    /// `position_scale^2`, so the KL term's effective weight is
    /// `beta / position_scale^2`.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t1: 5,
            t2: 5,
            dt: 0.2,
            lstm_hidden: 16,
            env_embed: 16,
            encoder_hidden: vec![64; 3],
            decoder_hidden: vec![64; 3],
            latent_dim: 2,
            beta: 0.005,
            use_intention: true,
            position_scale: 4.5,
        }
    }
}

impl ModelConfig {
    /// Small widths for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            lstm_hidden: 3,
            env_embed: 3,
            encoder_hidden: vec![3; 3],
            decoder_hidden: vec![3; 3],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.t1, self.t2, self.lstm_hidden, self.env_embed, self.latent_dim];
        if sizes.contains(&0)
            || self.encoder_hidden.contains(&0)
            || self.decoder_hidden.contains(&0)
            || !(self.dt > 0.0)
            || !(self.position_scale > 0.0 && self.position_scale.is_finite())
        {
            return Err(Error::InvalidArgument("model sizes and dt must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn condition_dim(&self) -> usize {
        self.lstm_hidden + self.env_embed
    }

    pub fn intention_dim(&self) -> usize {
        if self.use_intention {
            BRANCH_COUNT
        } else {
            0
        }
    }

    pub fn output_dim(&self) -> usize {
        self.t2 * JOINT_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
    pub eps: Tensor,
}

/// `z = mu + exp(0.5 log_var) * eps`.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, eps: &Tensor) -> Result<LatentSample> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(Error::Shape("mu, log_var and eps must have equal length".into()));
    }
    let z = mu.data().iter().zip(log_var.data()).zip(eps.data()).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect();
    Ok(LatentSample { z: Tensor::vector(z), mu: mu.clone(), log_var: log_var.clone(), eps: eps.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Closed-form `KL(N(mu, diag exp(log_var)) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu.iter().zip(log_var).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

/// Mean squared reconstruction error plus `beta` times the KL term.
pub fn elbo_loss(y: &Tensor, y_hat: &Tensor, mu: &Tensor, log_var: &Tensor, beta: f64) -> Result<ElboTerms> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    if y.len() != y_hat.len() || mu.len() != log_var.len() {
        return Err(Error::Shape("elbo inputs have mismatched lengths".into()));
    }
    let reconstruction = y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    let kl = kl_divergence(mu.data(), log_var.data());
    Ok(ElboTerms { total: reconstruction + beta * kl, reconstruction, kl })
}

/// Joint future samples with their per-dimension mean and population
/// variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Each `[T2, 4]`.
    pub samples: Vec<Tensor>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PredictionResult {
    pub fn from_samples(samples: Vec<Tensor>) -> Result<Self> {
        let first =
            samples.first().ok_or_else(|| Error::InvalidArgument("prediction needs at least one sample".into()))?;
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("samples differ in size".into()));
        }
        let n = samples.len() as f64;
        // offsets from the first sample keep identical samples exact
        let base = first.data().to_vec();
        let mut mean = vec![0.0; d];
        for s in &samples {
            for ((m, v), b) in mean.iter_mut().zip(s.data()).zip(&base) {
                *m += v - b;
            }
        }
        for (m, b) in mean.iter_mut().zip(&base) {
            *m = b + *m / n;
        }
        let mut variance = vec![0.0; d];
        for s in &samples {
            for ((var, v), m) in variance.iter_mut().zip(s.data()).zip(&mean) {
                *var += (v - m).powi(2) / n;
            }
        }
        Ok(PredictionResult { samples, mean, variance })
    }

    pub fn map_samples(&self, f: impl Fn(&Tensor) -> Tensor) -> Result<Self> {
        PredictionResult::from_samples(self.samples.iter().map(f).collect())
    }
}

/// LSTM over the past joint track plus a dense embedding of the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder {
    lstm: LstmCell,
    env: DenseLayer,
    t1: usize,
}

impl ConditionEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let lstm = LstmCell::new(store, &format!("{name}.lstm"), JOINT_DIM, config.lstm_hidden, rng);
        let env = DenseLayer::new(store, &format!("{name}.env"), ENV_DIM, config.env_embed, Activation::Tanh, rng);
        ConditionEmbedder { lstm, env, t1: config.t1 }
    }

    /// `[B, lstm_hidden + env_embed]` for a batch of feature vectors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[&FeatureVector]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(fv) = batch.iter().find(|fv| fv.t1() != self.t1) {
            return Err(Error::Shape(format!("expected T1 = {}, got {}", self.t1, fv.t1())));
        }
        let b = batch.len();
        let steps: Vec<Var> = (0..self.t1)
            .map(|k| {
                let data = batch.iter().flat_map(|fv| fv.past_joint.row(k).to_vec()).collect();
                g.input(Tensor::raw(vec![b, JOINT_DIM], data))
            })
            .collect();
        let h = self.lstm.run(g, store, &steps)?;
        let env_data = batch.iter().flat_map(|fv| fv.environment.data().to_vec()).collect();
        let env_in = g.input(Tensor::raw(vec![b, ENV_DIM], env_data));
        let e = self.env.forward(g, store, env_in)?;
        Ok(g.concat(&[h, e]))
    }
}

pub(crate) fn intention_batch(g: &mut Graph, cs: &[IntentionOneHot]) -> Var {
    let data = cs.iter().flat_map(|c| c.to_array()).collect();
    g.input(Tensor::raw(vec![cs.len(), BRANCH_COUNT], data))
}

/// Adds the flattened `anchor` to a displacement, keeping its shape.
pub(crate) fn anchored(mut d: Tensor, anchor: &Tensor) -> Tensor {
    for (v, a) in d.data_mut().iter_mut().zip(anchor.data()) {
        *v += a;
    }
    d
}

pub(crate) fn rows_input(g: &mut Graph, rows: &[&Tensor]) -> Var {
    let cols = rows[0].len();
    let data = rows.iter().flat_map(|t| t.data().to_vec()).collect();
    g.input(Tensor::raw(vec![rows.len(), cols], data))
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Layer handles of the CVAE; the weights live in a separate store.
#[derive(Debug, Clone, PartialEq)]
struct CvaeNet {
    embed: ConditionEmbedder,
    encoder: Mlp,
    decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cvae {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: CvaeNet,
    trained: bool,
}

impl Cvae {
    /// Fresh model with parameters drawn from `init`.
    pub fn new(config: ModelConfig, init: &SeedStream) -> Result<Self> {
        config.validate()?;
        let mut rng = init.rng();
        let mut params = ParamStore::new();
        let embed = ConditionEmbedder::new(&mut params, "embed", &config, &mut rng);
        let cx = config.condition_dim() + config.intention_dim();
        let mut enc_dims = vec![cx + config.output_dim()];
        enc_dims.extend(&config.encoder_hidden);
        enc_dims.push(2 * config.latent_dim);
        let encoder = Mlp::new(&mut params, "encoder", &enc_dims, Activation::Tanh, Activation::Identity, &mut rng);
        let mut dec_dims = vec![cx + config.latent_dim];
        dec_dims.extend(&config.decoder_hidden);
        dec_dims.push(config.output_dim());
        let decoder = Mlp::new(&mut params, "decoder", &dec_dims, Activation::Tanh, Activation::Identity, &mut rng);
        Ok(Cvae { config, params, net: CvaeNet { embed, encoder, decoder }, trained: false })
    }

    pub fn method_tag(&self) -> &'static str {
        if self.config.use_intention {
            "proposed"
        } else {
            "cvae-noI"
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            method: self.method_tag().to_string(),
            trained: self.trained,
            provenance: Default::default(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Cvae::new(config, &SeedStream::new(0))?;
        if ck.method != model.method_tag() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds `{}`, config describes `{}`",
                ck.method,
                model.method_tag()
            )));
        }
        model.params.load_from(&ck.params)?;
        model.trained = ck.trained;
        Ok(model)
    }

    fn with_intention(&self, g: &mut Graph, base: Var, cs: &[IntentionOneHot]) -> Var {
        if self.config.use_intention {
            let c = intention_batch(g, cs);
            g.concat(&[base, c])
        } else {
            base
        }
    }

    fn encode_graph(&self, g: &mut Graph, store: &ParamStore, xc: Var, y: Var) -> Result<(Var, Var)> {
        let input = g.concat(&[xc, y]);
        let out = self.net.encoder.forward(g, store, input)?;
        let l = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, l), g.slice_cols(out, l, l)))
    }

    fn decode_graph(&self, g: &mut Graph, store: &ParamStore, xc: Var, z: Var) -> Result<Var> {
        let input = g.concat(&[xc, z]);
        self.net.decoder.forward(g, store, input)
    }

    /// Mean ELBO over a batch, with `eps` drawn from `rng`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        rng: &mut Rng,
    ) -> Result<BatchLoss> {
        let fvs: Vec<&FeatureVector> = batch.iter().map(|e| &e.features).collect();
        let eps = normal_tensor(&[batch.len(), self.config.latent_dim], rng);
        self.batch_loss_with_eps(g, store, &fvs, batch, eps)
    }

    fn batch_loss_with_eps(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fvs: &[&FeatureVector],
        batch: &[&Example],
        eps: Tensor,
    ) -> Result<BatchLoss> {
        let out_dim = self.config.output_dim();
        if let Some(e) = batch.iter().find(|e| e.future.len() != out_dim) {
            return Err(Error::Shape(format!("future has {} values, expected {out_dim}", e.future.len())));
        }
        let b = batch.len() as f64;
        let x = self.net.embed.forward(g, store, fvs)?;
        let cs: Vec<IntentionOneHot> = fvs.iter().map(|f| f.intention).collect();
        let xc = self.with_intention(g, x, &cs);
        let ds: Vec<Tensor> = batch.iter().map(|e| e.features.displacement(&e.future)).collect();
        let y = rows_input(g, &ds.iter().collect::<Vec<_>>());
        let (mu, lv) = self.encode_graph(g, store, xc, y)?;
        let half = g.scale(lv, 0.5);
        let sigma = g.exp(half);
        let e = g.input(eps);
        let noise = g.mul(sigma, e);
        let z = g.add(mu, noise);
        let y_hat = self.decode_graph(g, store, xc, z)?;

        let diff = g.sub(y_hat, y);
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let reconstruction = g.scale(mse, self.config.position_scale.powi(2));
        let var = g.exp(lv);
        let mu2 = g.square(mu);
        let t = g.add(var, mu2);
        let t = g.sub(t, lv);
        let t = g.add_scalar(t, -1.0);
        let kl_sum = g.sum(t);
        let kl = g.scale(kl_sum, 0.5 / b);
        let weighted = g.scale(kl, self.config.beta);
        let total = g.add(reconstruction, weighted);
        Ok(BatchLoss { total, reconstruction, kl: Some(kl) })
    }

    /// Loss on a batch with fixed `eps` (`[B, latent_dim]`), for gradient
    /// checks.
    pub fn loss_graph_with_eps(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        eps: Tensor,
    ) -> Result<BatchLoss> {
        let fvs: Vec<&FeatureVector> = batch.iter().map(|e| &e.features).collect();
        self.batch_loss_with_eps(g, store, &fvs, batch, eps)
    }

    /// Condition vector `x` of one feature vector.
    pub fn embed_condition(&self, fv: &FeatureVector) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = self.net.embed.forward(&mut g, &self.params, &[fv])?;
        Ok(Tensor::vector(g.value(x).data().to_vec()))
    }

    fn check_len(t: &Tensor, n: usize, what: &str) -> Result<()> {
        if t.len() != n {
            return Err(Error::Shape(format!("{what} must have {n} values, got {}", t.len())));
        }
        Ok(())
    }

    /// `y` is the future as a displacement from the last observed position,
    /// see [`FeatureVector::displacement`].
    pub fn encode(&self, x: &Tensor, c: IntentionOneHot, y: &Tensor) -> Result<(Tensor, Tensor)> {
        Self::check_len(x, self.config.condition_dim(), "x")?;
        Self::check_len(y, self.config.output_dim(), "y")?;
        let mut g = Graph::new();
        let xv = rows_input(&mut g, &[x]);
        let xc = self.with_intention(&mut g, xv, &[c]);
        let yv = rows_input(&mut g, &[y]);
        let (mu, lv) = self.encode_graph(&mut g, &self.params, xc, yv)?;
        Ok((Tensor::vector(g.value(mu).data().to_vec()), Tensor::vector(g.value(lv).data().to_vec())))
    }

    /// Future as a displacement from the last observed position; add
    /// [`FeatureVector::anchor`] for positions.
    pub fn decode(&self, x: &Tensor, c: IntentionOneHot, z: &Tensor) -> Result<Tensor> {
        Self::check_len(x, self.config.condition_dim(), "x")?;
        Self::check_len(z, self.config.latent_dim, "z")?;
        Ok(self.decode_many(x, &[c], &[z.data()])?.remove(0))
    }

    /// Decodes one latent row per entry of `zs`, pairing it with `cs[i]` (or
    /// `cs[0]` when a single intention is given).
    fn decode_many(&self, x: &Tensor, cs: &[IntentionOneHot], zs: &[&[f64]]) -> Result<Vec<Tensor>> {
        let n = zs.len();
        let mut g = Graph::new();
        let xr: Vec<&Tensor> = vec![x; n];
        let xv = rows_input(&mut g, &xr);
        let cs: Vec<IntentionOneHot> = if cs.len() == 1 { vec![cs[0]; n] } else { cs.to_vec() };
        let xc = self.with_intention(&mut g, xv, &cs);
        let zdata = zs.iter().flat_map(|z| z.to_vec()).collect();
        let zv = g.input(Tensor::raw(vec![n, self.config.latent_dim], zdata));
        let out = self.decode_graph(&mut g, &self.params, xc, zv)?;
        let out = g.value(out);
        Ok((0..n).map(|r| Tensor::raw(vec![self.config.t2, JOINT_DIM], out.row(r).to_vec())).collect())
    }

    /// Encoder statistics `(mu, log_var)` of a complete example.
    pub fn encode_example(&self, ex: &Example) -> Result<(Tensor, Tensor)> {
        let x = self.embed_condition(&ex.features)?;
        self.encode(&x, ex.features.intention, &ex.features.displacement(&ex.future))
    }

    pub fn train(&mut self, data: &[Example], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
        let stream = SeedStream::new(cfg.seed).derive(self.method_tag());
        // the closure reads layer handles while `fit` mutates the weights
        let shell =
            Cvae { config: self.config.clone(), params: ParamStore::new(), net: self.net.clone(), trained: false };
        let curve = fit(&mut self.params, data.len(), cfg, &stream, |g, store, idx, rng| {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            shell.batch_loss(g, store, &batch, rng)
        })?;
        self.trained = true;
        Ok(curve)
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Untrained)
        }
    }

    /// Decodes `n_samples` prior draws `z ~ N(0, I)` with the feature's own
    /// intention. The encoder is not used.
    pub fn predict(&self, fv: &FeatureVector, n_samples: usize, seed: u64) -> Result<PredictionResult> {
        self.require_trained()?;
        self.predict_with(fv, &[(fv.intention, n_samples)], seed)
    }

    fn predict_with(
        &self,
        fv: &FeatureVector,
        groups: &[(IntentionOneHot, usize)],
        seed: u64,
    ) -> Result<PredictionResult> {
        let n: usize = groups.iter().map(|g| g.1).sum();
        if n == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        let x = self.embed_condition(fv)?;
        let mut rng = SeedStream::new(seed).derive("latent").rng();
        let z = normal_tensor(&[n, self.config.latent_dim], &mut rng);
        let zs: Vec<&[f64]> = z.data().chunks(self.config.latent_dim).collect();
        let cs: Vec<IntentionOneHot> = groups.iter().flat_map(|&(c, k)| std::iter::repeat_n(c, k)).collect();
        let anchor = fv.anchor(self.config.t2);
        PredictionResult::from_samples(
            self.decode_many(&x, &cs, &zs)?.into_iter().map(|d| anchored(d, &anchor)).collect(),
        )
    }

    /// Spreads `n_samples` over every branch whose belief reaches
    /// `threshold`, in proportion to the renormalized belief (largest
    /// remainder rounding). Returns the samples and the branch used for each.
    /// Models without intention input ignore the belief.
    pub fn predict_across_intentions(
        &self,
        fv: &FeatureVector,
        belief: &[f64; BRANCH_COUNT],
        n_samples: usize,
        seed: u64,
        threshold: f64,
    ) -> Result<(PredictionResult, Vec<u8>)> {
        self.require_trained()?;
        if !self.config.use_intention {
            let r = self.predict(fv, n_samples, seed)?;
            return Ok((r, vec![fv.intention.branch(); n_samples]));
        }
        let counts = allocate_samples(belief, n_samples, threshold)?;
        let groups: Vec<(IntentionOneHot, usize)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 0)
            .map(|(b, &k)| IntentionOneHot::new(b as u8).map(|c| (c, k)))
            .collect::<Result<_>>()?;
        let branches = groups.iter().flat_map(|&(c, k)| std::iter::repeat_n(c.branch(), k)).collect();
        Ok((self.predict_with(fv, &groups, seed)?, branches))
    }

    /// Decodes every grid point with the feature's condition and intention,
    /// in grid order.
    pub fn latent_grid(&self, fv: &FeatureVector, grid: &[[f64; 2]]) -> Result<Vec<([f64; 2], Tensor)>> {
        self.require_trained()?;
        if self.config.latent_dim != 2 {
            return Err(Error::InvalidArgument(format!(
                "latent grid needs a 2-D latent space, model has {}",
                self.config.latent_dim
            )));
        }
        if grid.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.embed_condition(fv)?;
        let zs: Vec<&[f64]> = grid.iter().map(|p| p.as_slice()).collect();
        let anchor = fv.anchor(self.config.t2);
        let out = self.decode_many(&x, &[fv.intention], &zs)?.into_iter().map(|d| anchored(d, &anchor));
        Ok(grid.iter().copied().zip(out).collect())
    }
}

/// Sample counts per branch: proportional to the belief restricted to
/// branches at or above `threshold`, rounded by largest remainder with ties
/// to the lower branch. Falls back to the argmax when no branch qualifies.
pub fn allocate_samples(belief: &[f64; BRANCH_COUNT], n: usize, threshold: f64) -> Result<[usize; BRANCH_COUNT]> {
    if belief.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidBelief("belief entries must be finite and >= 0".into()));
    }
    let mut mass = [0.0; BRANCH_COUNT];
    for (m, &p) in mass.iter_mut().zip(belief) {
        if p >= threshold && p > 0.0 {
            *m = p;
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        let best = (0..BRANCH_COUNT).fold(0, |b, i| if belief[i] > belief[b] { i } else { b });
        mass = [0.0; BRANCH_COUNT];
        mass[best] = 1.0;
    }
    let total: f64 = mass.iter().sum();
    let quotas: Vec<f64> = mass.iter().map(|m| m / total * n as f64).collect();
    let mut counts = [0usize; BRANCH_COUNT];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..BRANCH_COUNT).filter(|&i| mass[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Row-major square grid: the first latent coordinate varies slowest.
pub fn grid_points(min: f64, max: f64, steps: usize) -> Result<Vec<[f64; 2]>> {
    if steps == 0 || !(max >= min) {
        return Err(Error::InvalidArgument("grid needs steps > 0 and max >= min".into()));
    }
    let at = |i: usize| if steps == 1 { 0.5 * (min + max) } else { min + (max - min) * i as f64 / (steps - 1) as f64 };
    Ok((0..steps).flat_map(|i| (0..steps).map(move |j| [at(i), at(j)])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(config: ModelConfig) -> Cvae {
        let mut m = Cvae::new(config, &SeedStream::new(0)).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        m.mark_trained();
        m
    }

    fn fv(seed: u64) -> FeatureVector {
        let mut rng = SeedStream::new(seed).rng();
        FeatureVector::new(
            normal_tensor(&[5, 4], &mut rng),
            normal_tensor(&[6], &mut rng),
            IntentionOneHot::new(3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::vector(vec![1.0, 2.0]);
        let lv = Tensor::vector(vec![0.0, 2.0 * 2f64.ln()]);
        let s = reparameterize(&mu, &lv, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!((s.z.data()[0] - 2.0).abs() < 1e-15 && (s.z.data()[1] - 4.0).abs() < 1e-12);
        let s = reparameterize(&mu, &lv, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.z, mu);
        assert!(reparameterize(&mu, &lv, &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn elbo_examples() {
        let y = Tensor::vector(vec![0.5; 20]);
        let z2 = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(elbo_loss(&y, &y, &z2, &z2, 0.005).unwrap().total, 0.0);
        let kl = elbo_loss(&y, &y, &Tensor::vector(vec![1.0, 0.0]), &z2, 1.0).unwrap().kl;
        assert!((kl - 0.5).abs() < 1e-15);
        let y_hat = Tensor::vector(vec![1.5; 20]);
        let t = elbo_loss(&y, &y_hat, &Tensor::vector(vec![1.0, -1.0]), &z2, 0.0).unwrap();
        assert_eq!(t.total, t.reconstruction);
        assert_eq!(t.reconstruction, 1.0);
        assert!(elbo_loss(&y, &y, &z2, &z2, -0.1).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let m = zero_model(ModelConfig::default());
        let x = m.embed_condition(&fv(1)).unwrap();
        assert_eq!(x.data(), &[0.0; 32]);
        let c = IntentionOneHot::new(0).unwrap();
        let (mu, lv) = m.encode(&x, c, &Tensor::vector(vec![0.3; 20])).unwrap();
        assert_eq!((mu.data(), lv.data()), (&[0.0, 0.0][..], &[0.0, 0.0][..]));
        let y = m.decode(&x, c, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(y.len(), 20);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = zero_model(ModelConfig::default());
        let c = IntentionOneHot::new(0).unwrap();
        assert!(m.decode(&Tensor::vector(vec![0.0; 31]), c, &Tensor::vector(vec![0.0; 2])).is_err());
        assert!(m.encode(&Tensor::vector(vec![0.0; 32]), c, &Tensor::vector(vec![0.0; 19])).is_err());
        let short = FeatureVector::new(Tensor::zeros(&[4, 4]), Tensor::zeros(&[6]), c).unwrap();
        assert!(m.embed_condition(&short).is_err());
    }

    #[test]
    fn untrained_model_refuses_to_predict() {
        let m = Cvae::new(ModelConfig::default(), &SeedStream::new(0)).unwrap();
        assert!(matches!(m.predict(&fv(2), 3, 0), Err(Error::Untrained)));
    }

    #[test]
    fn predict_is_seeded() {
        let mut m = Cvae::new(ModelConfig::default(), &SeedStream::new(5)).unwrap();
        m.mark_trained();
        let a = m.predict(&fv(3), 10, 42).unwrap();
        assert_eq!(a.samples.len(), 10);
        assert_eq!(a, m.predict(&fv(3), 10, 42).unwrap());
        assert_ne!(a, m.predict(&fv(3), 10, 43).unwrap());
        assert!(a.variance.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn grid_origin_matches_zero_latent_decode() {
        let mut m = Cvae::new(ModelConfig::default(), &SeedStream::new(6)).unwrap();
        m.mark_trained();
        let f = fv(4);
        let g = m.latent_grid(&f, &[[0.0, 0.0], [0.5, -1.0], [0.0, 0.0]]).unwrap();
        let x = m.embed_condition(&f).unwrap();
        let direct = m.decode(&x, f.intention, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(g[0].1, anchored(direct, &f.anchor(m.config.t2)));
        assert_eq!(g[0].1, g[2].1);
        assert_eq!(grid_points(-2.0, 2.0, 5).unwrap().len(), 25);
    }

    #[test]
    fn allocation_is_proportional() {
        let mut b = [0.0; 8];
        b[2] = 0.5;
        b[3] = 0.3;
        b[4] = 0.17;
        b[5] = 0.03;
        let c = allocate_samples(&b, 100, 0.05).unwrap();
        // renormalized over 0.97: 51.5, 30.9, 17.5
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert_eq!(c[5], 0);
        assert_eq!((c[2], c[3], c[4]), (52, 31, 17));
    }

    #[test]
    fn checkpoint_roundtrip_keeps_predictions() {
        let mut m = Cvae::new(ModelConfig::default(), &SeedStream::new(7)).unwrap();
        m.mark_trained();
        let ck = m.to_checkpoint();
        let back = Cvae::from_checkpoint(ModelConfig::default(), &ck).unwrap();
        assert_eq!(back.predict(&fv(5), 4, 1).unwrap(), m.predict(&fv(5), 4, 1).unwrap());
        let no_i = ModelConfig { use_intention: false, ..ModelConfig::default() };
        assert!(Cvae::from_checkpoint(no_i, &ck).is_err());
    }
}
