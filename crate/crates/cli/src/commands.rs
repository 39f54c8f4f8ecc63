use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::Serialize;

use ipred::baselines::{
    dropout_checkpoint, dropout_from_checkpoint, train_cvae_no_intention, train_mc_dropout, train_mlp_ensemble,
    EnsembleModel,
};
use ipred::cvae::{grid_points, Cvae, Example, ModelConfig};
use ipred::diffcore::Checkpoint;
use ipred::geometry::DEFAULT_CROSS_TOL;
use ipred::intention::{
    select_pairs, write_belief_log, IntentionBelief, IntentionOneHot, IntentionTracker, DEFAULT_PROB_THRESHOLD,
};
use ipred::metrics::{case_seed, evaluate, EvalReport, McDropout, Predictor};
use ipred::rng::{config_digest, SeedStream};
use ipred::synthdata::{
    episode_windows, generate_dataset, read_dataset, with_inferred_intention, write_dataset, Dataset, Label, Split,
    Window,
};
use ipred::training::{EpochLoss, TrainConfig};

use crate::config::RunConfig;

const TOOL: &str = "ipred";
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Proposed,
    CvaeNoI,
    MlpEnsemble,
    McDropout,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::CvaeNoI, Method::MlpEnsemble, Method::McDropout];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::CvaeNoI => "cvae-noI",
            Method::MlpEnsemble => "mlp-ensemble",
            Method::McDropout => "mc-dropout",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
            format!("unknown method `{s}`; valid methods: {}", valid.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSubset {
    All,
    Bimodal,
}

impl FromStr for EvalSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(EvalSubset::All),
            "bimodal" => Ok(EvalSubset::Bimodal),
            _ => Err(format!("unknown subset `{s}`; valid subsets: all, bimodal")),
        }
    }
}

/// Seed, config digest and tool version, embedded in every artifact.
#[derive(Debug, Clone, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config_digest: String,
}

impl Provenance {
    fn comment(&self) -> String {
        format!("# {} {} seed={} config={}\n", self.tool, self.version, self.seed, self.config_digest)
    }

    fn apply(&self, ck: &mut Checkpoint) {
        ck.provenance.insert("tool".into(), self.tool.into());
        ck.provenance.insert("version".into(), self.version.into());
        ck.provenance.insert("seed".into(), self.seed.to_string());
        ck.provenance.insert("config_digest".into(), self.config_digest.clone());
    }
}

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub config: RunConfig,
}

impl Context {
    pub fn new(seed: u64, out: PathBuf, config: Option<&Path>) -> Result<Self> {
        let mut config = RunConfig::load(config)?;
        config.data.seed = seed;
        config.train.seed = seed;
        Ok(Context { seed, out, config })
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn model_dir(&self, m: Method) -> PathBuf {
        self.out.join("models").join(m.tag())
    }

    fn provenance<T: Serialize>(&self, what: &T) -> Provenance {
        Provenance { tool: TOOL, version: VERSION, seed: self.seed, config_digest: config_digest(&(what, self.seed)) }
    }

    fn load_data(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        read_dataset(&dir)
            .with_context(|| format!("loading dataset from {} (run `ipred gen-data` first)", dir.display()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(ctx: &Context, cases: usize, split: Option<f64>, force: bool) -> Result<()> {
    let dir = ctx.data_dir();
    if dir.join("manifest.json").exists() && !force {
        bail!("dataset already exists at {}; pass --force to overwrite", dir.display());
    }
    let mut cfg = ctx.config.data.clone();
    cfg.n_cases = cases;
    if let Some(s) = split {
        cfg.split_ratio = s;
    }
    let data = generate_dataset(&ctx.config.roundabout, &cfg)?;
    write_dataset(&dir, &data)?;
    let train = data.manifest.cases.iter().filter(|c| c.split == Split::Train).count();
    println!(
        "{} cases: {} train / {} test episodes ({} train / {} test windows) in {}",
        cases,
        train,
        cases - train,
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

/// Model settings and provenance written next to each checkpoint.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct Sidecar {
    tool: String,
    version: String,
    seed: u64,
    config_digest: String,
    method: String,
    dataset_digest: String,
    model: ModelConfig,
    train: TrainConfig,
    ensemble_members: usize,
    dropout: f64,
}

fn mean_curve(curves: &[Vec<EpochLoss>]) -> Vec<EpochLoss> {
    let n = curves.len() as f64;
    (0..curves[0].len())
        .map(|e| EpochLoss {
            epoch: e,
            train: curves.iter().map(|c| c[e].train).sum::<f64>() / n,
            val: curves.iter().map(|c| c[e].val).sum::<Option<f64>>().map(|v| v / n),
        })
        .collect()
}

pub fn train(ctx: &Context, method: Method, beta: Option<f64>, epochs: Option<usize>) -> Result<()> {
    let data = ctx.load_data()?;
    let mut model =
        ModelConfig { t1: data.manifest.config.t1, t2: data.manifest.config.t2, ..ctx.config.model.clone() };
    if let Some(b) = beta {
        model.beta = b;
    }
    if matches!(method, Method::MlpEnsemble | Method::McDropout) {
        model.use_intention = ctx.config.baseline_intention;
    }
    let mut train = ctx.config.train.clone();
    if let Some(e) = epochs {
        train.epochs = e;
    }
    let examples = data.train_examples();
    let (members, dropout) = (ctx.config.ensemble_members, ctx.config.dropout);
    let prov = ctx.provenance(&(method.tag(), &model, &train, members, dropout, &data.manifest.config_digest));
    log::info!("training {method} on {} windows", examples.len());

    let (mut ck, curve) = match method {
        Method::Proposed => {
            let cfg = ModelConfig { use_intention: true, ..model.clone() };
            let mut m = Cvae::new(cfg, &SeedStream::new(train.seed).derive("init"))?;
            let curve = m.train(&examples, &train)?;
            (m.to_checkpoint(), curve)
        }
        Method::CvaeNoI => {
            let (m, curve) = train_cvae_no_intention(&examples, &model, &train)?;
            (m.to_checkpoint(), curve)
        }
        Method::MlpEnsemble => {
            let (m, curves) = train_mlp_ensemble(&examples, members, &model, &train)?;
            (m.to_checkpoint(), mean_curve(&curves))
        }
        Method::McDropout => {
            let (m, curve) = train_mc_dropout(&examples, dropout, &model, &train)?;
            (dropout_checkpoint(&m), curve)
        }
    };
    prov.apply(&mut ck);

    let dir = ctx.model_dir(method);
    fs::create_dir_all(&dir)?;
    ck.save(&dir.join("checkpoint.bin"))?;
    let mut csv = prov.comment().into_bytes();
    ipred::training::write_loss_csv(&mut csv, &curve)?;
    fs::write(dir.join("loss.csv"), csv)?;
    let sidecar = Sidecar {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: ctx.seed,
        config_digest: prov.config_digest.clone(),
        method: method.tag().into(),
        dataset_digest: data.manifest.config_digest.clone(),
        model,
        train,
        ensemble_members: members,
        dropout,
    };
    write_json(&dir.join("config.json"), &sidecar)?;
    if let Some(last) = curve.last() {
        println!("{method}: final train loss {:.6} -> {}", last.train, dir.display());
    }
    Ok(())
}

enum Loaded {
    Cvae(Cvae),
    Ensemble(EnsembleModel),
    Dropout(McDropout),
}

impl Loaded {
    fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Cvae(m) => m,
            Loaded::Ensemble(m) => m,
            Loaded::Dropout(m) => m,
        }
    }
}

fn load_model(ctx: &Context, method: Method) -> Result<(Loaded, Sidecar)> {
    let dir = ctx.model_dir(method);
    let ck_path = dir.join("checkpoint.bin");
    if !ck_path.exists() {
        bail!("no checkpoint for method `{method}` at {} (run `ipred train --method {method}`)", ck_path.display());
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("config.json"))?)
        .with_context(|| format!("reading model config of `{method}`"))?;
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading checkpoint of `{method}`"))?;
    let model = match method {
        Method::Proposed => {
            Loaded::Cvae(Cvae::from_checkpoint(ModelConfig { use_intention: true, ..sidecar.model.clone() }, &ck)?)
        }
        Method::CvaeNoI => {
            Loaded::Cvae(Cvae::from_checkpoint(ModelConfig { use_intention: false, ..sidecar.model.clone() }, &ck)?)
        }
        Method::MlpEnsemble => Loaded::Ensemble(EnsembleModel::from_checkpoint(&sidecar.model, &ck)?),
        Method::McDropout => {
            Loaded::Dropout(McDropout { model: dropout_from_checkpoint(&sidecar.model, sidecar.dropout, &ck)? })
        }
    };
    Ok((model, sidecar))
}

#[derive(Debug, Serialize)]
struct PredictionStep {
    case_id: String,
    t: f64,
    pairs: Vec<ipred::intention::InteractionPair>,
    note: Option<String>,
    samples: Vec<Vec<[f64; 4]>>,
}

#[derive(Debug, Serialize)]
struct PredictionFile {
    #[serde(flatten)]
    provenance: Provenance,
    method: String,
    case_id: String,
    steps: Vec<PredictionStep>,
}

fn default_case(data: &Dataset) -> Result<String> {
    data.manifest
        .cases
        .iter()
        .find(|c| c.split == Split::Test)
        .map(|c| c.case_id.clone())
        .ok_or_else(|| anyhow!("dataset has no test cases"))
}

/// Path-level belief of each car after every sample time, tracked at the
/// update cadence.
fn track_case(ep: &ipred::synthdata::Episode, data: &Dataset) -> Result<Vec<(f64, Vec<IntentionBelief>)>> {
    let cars = [("A", &ep.car_a, ep.entry_a), ("B", &ep.car_b, ep.entry_b)];
    let mut trackers = cars
        .iter()
        .map(|(id, traj, entry)| IntentionTracker::for_entry(*id, &data.paths, *entry, traj.first().t))
        .collect::<ipred::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for s in ep.car_b.samples() {
        let mut changed = false;
        for (tr, (_, traj, _)) in trackers.iter_mut().zip(&cars) {
            changed |= tr.step(traj, s.t)?;
        }
        if changed || out.is_empty() {
            out.push((s.t, trackers.iter().map(|t| t.snapshot()).collect()));
        }
    }
    Ok(out)
}

pub fn predict(ctx: &Context, method: Method, case: Option<&str>, samples: usize) -> Result<()> {
    if samples == 0 {
        bail!("--samples must be at least 1");
    }
    let data = ctx.load_data()?;
    let (model, sidecar) = load_model(ctx, method)?;
    let case_id = match case {
        Some(c) => c.to_string(),
        None => default_case(&data)?,
    };
    let ep = data.episode(&case_id).ok_or_else(|| anyhow!("no case `{case_id}` in the dataset"))?;
    let history = track_case(ep, &data)?;
    let windows: Vec<Window> =
        episode_windows(ep, &data.manifest.spec, &data.paths, sidecar.model.t1, sidecar.model.t2)?
            .into_iter()
            .map(with_inferred_intention)
            .collect();
    let prov = ctx.provenance(&(method.tag(), &sidecar.config_digest, &case_id, samples));
    let sampling = SeedStream::new(ctx.seed).derive("predict");

    let mut steps = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let beliefs = &history.iter().rev().find(|(t, _)| *t <= w.meta.t + 1e-9).expect("first sample tracked").1;
        let pairs = select_pairs(beliefs, &data.paths, DEFAULT_PROB_THRESHOLD, DEFAULT_CROSS_TOL)?;
        let note = pairs
            .is_empty()
            .then(|| "no interacting pair: cars predicted jointly without interaction evidence".to_string());
        let r = model.predictor().predict(&w.example, samples, case_seed(sampling.seed(), i))?;
        let world = r
            .samples
            .iter()
            .map(|s| {
                let s = data.normalizer.joint_to_world(s);
                s.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
            })
            .collect();
        steps.push(PredictionStep { case_id: case_id.clone(), t: w.meta.t, pairs, note, samples: world });
    }

    let dir = ctx.out.join("predictions").join(method.tag());
    fs::create_dir_all(&dir)?;
    let file =
        PredictionFile { provenance: prov.clone(), method: method.tag().into(), case_id: case_id.clone(), steps };
    write_json(&dir.join(format!("{case_id}.json")), &file)?;
    let mut log = prov.comment().into_bytes();
    write_belief_log(&mut log, history.iter().flat_map(|(_, bs)| bs.iter().map(|b| (case_id.as_str(), b))))?;
    fs::write(dir.join(format!("{case_id}_beliefs.csv")), log)?;
    println!("{method}: {} steps x {samples} samples for {case_id} -> {}", file.steps.len(), dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    tool: &'static str,
    version: &'static str,
    subset: EvalSubset,
    report: &'a EvalReport,
}

fn test_windows(data: &Dataset, subset: EvalSubset) -> Vec<&Window> {
    data.test.iter().filter(|w| subset == EvalSubset::All || w.meta.bimodal).collect()
}

pub fn eval(ctx: &Context, methods: &[Method], samples: usize, subset: EvalSubset) -> Result<()> {
    let methods: Vec<Method> = if methods.is_empty() { Method::ALL.to_vec() } else { methods.to_vec() };
    let data = ctx.load_data()?;
    let loaded = methods.iter().map(|&m| load_model(ctx, m).map(|l| l.0)).collect::<Result<Vec<_>>>()?;
    let test: Vec<Example> = test_windows(&data, subset).into_iter().map(|w| w.example.clone()).collect();
    let predictors: Vec<&dyn Predictor> = loaded.iter().map(Loaded::predictor).collect();
    let report = evaluate(&predictors, &test, samples, ctx.seed, &data.normalizer)?;

    let dir = ctx.out.join("eval");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &ReportFile { tool: TOOL, version: VERSION, subset, report: &report })?;
    let table = report.to_table();
    fs::write(dir.join("report.txt"), format!("{table}config {} / {TOOL} {VERSION}\n", report.config_digest))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridPoint {
    z: [f64; 2],
    future: Vec<[f64; 4]>,
}

#[derive(Debug, Serialize)]
struct EncodedCase {
    case_id: String,
    t: f64,
    label: Label,
    mu: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct LatentFile {
    #[serde(flatten)]
    provenance: Provenance,
    method: String,
    case_id: String,
    t: f64,
    branch: u8,
    intention: [f64; 8],
    grid: Vec<GridPoint>,
    encoded: Vec<EncodedCase>,
}

pub fn latent_grid(
    ctx: &Context,
    method: Method,
    min: f64,
    max: f64,
    steps: usize,
    case: Option<&str>,
    branch: Option<u8>,
) -> Result<()> {
    if !matches!(method, Method::Proposed | Method::CvaeNoI) {
        bail!("latent-grid needs a CVAE method (proposed or cvae-noI), got `{method}`");
    }
    let grid = grid_points(min, max, steps)?;
    let data = ctx.load_data()?;
    let (Loaded::Cvae(model), sidecar) = load_model(ctx, method)? else { unreachable!("CVAE methods load a CVAE") };
    let candidates: Vec<&Window> = data.test.iter().filter(|w| case.is_none_or(|c| w.meta.case_id == c)).collect();
    let window = candidates
        .iter()
        .find(|w| w.meta.bimodal)
        .or(candidates.first())
        .ok_or_else(|| anyhow!("no test window for case {}", case.unwrap_or("(any)")))?;
    let mut fv = window.example.features.clone();
    if let Some(b) = branch {
        fv.intention = IntentionOneHot::new(b)?;
    }
    let decoded = model.latent_grid(&fv, &grid)?;
    let grid = decoded
        .into_iter()
        .map(|(z, t)| {
            let w = data.normalizer.joint_to_world(&t);
            GridPoint { z, future: w.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect() }
        })
        .collect();
    let interacting: Vec<&str> =
        data.manifest.cases.iter().filter(|c| c.interacts).map(|c| c.case_id.as_str()).collect();
    let encoded = data
        .test
        .iter()
        .filter(|w| interacting.contains(&w.meta.case_id.as_str()))
        .map(|w| {
            let (mu, _) = model.encode_example(&w.example)?;
            Ok(EncodedCase {
                case_id: w.meta.case_id.clone(),
                t: w.meta.t,
                label: w.meta.label,
                mu: mu.data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let prov = ctx.provenance(&(method.tag(), &sidecar.config_digest, min, max, steps, &window.meta.case_id, branch));
    let file = LatentFile {
        provenance: prov,
        method: method.tag().into(),
        case_id: window.meta.case_id.clone(),
        t: window.meta.t,
        branch: fv.intention.branch(),
        intention: fv.intention.to_array(),
        grid,
        encoded,
    };
    let dir = ctx.out.join("latent");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}_{}.json", method.tag(), window.meta.case_id));
    write_json(&path, &file)?;
    println!("{} grid points, {} encoded test windows -> {}", file.grid.len(), file.encoded.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        let err = "transformer".parse::<Method>().unwrap_err();
        assert!(err.contains("proposed, cvae-noI, mlp-ensemble, mc-dropout"), "{err}");
    }
}
