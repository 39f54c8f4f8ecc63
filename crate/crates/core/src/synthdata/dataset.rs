//! Sliding-window datasets built from generated episodes.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::sim::{generate_episode, Episode, Label, ScenarioParams};
use super::{build_reference_paths, route_id, RoundaboutSpec};
use crate::cvae::{Example, FeatureVector, Normalizer, ENV_DIM, JOINT_DIM};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{write_paths_json, write_trajectories_csv};
use crate::geometry::{Point2, ReferencePath, Trajectory};
use crate::intention::{map_belief_to_branches, IntentionOneHot, IntentionTracker, BRANCH_COUNT};
use crate::rng::{config_digest, SeedStream};

/// Distance ahead of the subject at which a missing front vehicle is placed.
pub const SENTINEL_DISTANCE: f64 = 30.0;
const MIN_CASES: usize = 10;
const MAX_ATTEMPTS: u64 = 20;
/// How far past the divergence point B must get within the horizon for a
/// window to count as bimodal.
const BIMODAL_REVEAL: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub split_ratio: f64,
    pub t1: usize,
    pub t2: usize,
    pub seed: u64,
    pub scenario: ScenarioParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_cases: 200, split_ratio: 0.8, t1: 5, t2: 5, seed: 0, scenario: ScenarioParams::default() }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases < MIN_CASES {
            return Err(Error::InvalidArgument(format!("need at least {MIN_CASES} cases, got {}", self.n_cases)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::InvalidArgument("split ratio must lie in (0, 1)".into()));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::InvalidArgument("t1 and t2 must be >= 1".into()));
        }
        self.scenario.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub case_id: String,
    /// Window number within its episode.
    pub index: usize,
    /// Present time: last step of the past.
    pub t: f64,
    pub entry_a: u8,
    pub entry_b: u8,
    pub exit_b: u8,
    pub label: Label,
    /// B may still leave at A's branch at the present time and the horizon
    /// shows whether it did.
    pub bimodal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub meta: WindowMeta,
    pub example: Example,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub seed: u64,
    pub label: Label,
    pub entry_a: u8,
    pub exit_a: u8,
    pub entry_b: u8,
    pub exit_b: u8,
    pub interacts: bool,
    pub split: Split,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    pub config: DatasetConfig,
    pub spec: RoundaboutSpec,
    pub cases: Vec<CaseRecord>,
    pub train_windows: usize,
    pub test_windows: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
    pub paths: Vec<ReferencePath>,
    pub normalizer: Normalizer,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

impl Dataset {
    pub fn train_examples(&self) -> Vec<Example> {
        self.train.iter().map(|w| w.example.clone()).collect()
    }

    pub fn test_examples(&self) -> Vec<Example> {
        self.test.iter().map(|w| w.example.clone()).collect()
    }

    pub fn episode(&self, case_id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.case_id == case_id)
    }
}

/// Direction of travel at sample `k`: the latest non-negligible
/// displacement, else `fallback`.
fn heading(traj: &Trajectory, k: usize, fallback: Point2) -> Point2 {
    let s = traj.samples();
    (1..=k)
        .rev()
        .map(|i| s[i].pos.sub(s[i - 1].pos))
        .find(|d| d.norm() > 1e-3)
        .map(|d| d.scale(1.0 / d.norm()))
        .unwrap_or(fallback)
}

/// `(dx, dy, v)` of the front vehicle relative to the subject, in model
/// units. Missing or far-away front vehicles become a sentinel straight
/// ahead at [`SENTINEL_DISTANCE`] with the subject's speed.
fn front_features(
    subject: &Trajectory,
    front: Option<&Trajectory>,
    k: usize,
    lane_heading: Point2,
    norm: &Normalizer,
) -> [f64; 3] {
    let me = subject.samples()[k];
    if let Some(f) = front {
        let other = f.samples()[k];
        let d = other.pos.sub(me.pos);
        if d.norm() <= SENTINEL_DISTANCE {
            return [d.x / norm.scale, d.y / norm.scale, norm.speed_to_model(other.v)];
        }
    }
    let d = heading(subject, k, lane_heading).scale(SENTINEL_DISTANCE);
    [d.x / norm.scale, d.y / norm.scale, norm.speed_to_model(me.v)]
}

fn find_path<'a>(paths: &'a [ReferencePath], id: &str) -> Result<&'a ReferencePath> {
    paths.iter().find(|p| p.id() == id).ok_or_else(|| Error::Dataset(format!("unknown route {id}")))
}

/// Branch belief of car B after each output sample, from an intention
/// tracker fed B's observed track.
pub fn belief_timeline(ep: &Episode, paths: &[ReferencePath]) -> Result<Vec<[f64; BRANCH_COUNT]>> {
    let samples = ep.car_b.samples();
    let mut tracker = IntentionTracker::for_entry("B", paths, ep.entry_b, samples[0].t)?;
    let mut current = map_belief_to_branches(tracker.belief(), paths, ep.entry_b)?;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if tracker.step(&ep.car_b, s.t)? {
            current = map_belief_to_branches(tracker.belief(), paths, ep.entry_b)?;
        }
        let mut arr = [0.0; BRANCH_COUNT];
        arr.copy_from_slice(current.probs());
        out.push(arr);
    }
    Ok(out)
}

/// Every `(T1 past, T2 future)` window of an episode. Episodes shorter than
/// `t1 + t2` samples give none.
pub fn episode_windows(
    ep: &Episode,
    spec: &RoundaboutSpec,
    paths: &[ReferencePath],
    t1: usize,
    t2: usize,
) -> Result<Vec<Window>> {
    let len = ep.car_a.len().min(ep.car_b.len());
    if len < t1 + t2 {
        log::warn!("case {}: {} samples is shorter than t1 + t2 = {}, skipped", ep.case_id, len, t1 + t2);
        return Ok(Vec::new());
    }
    let norm = spec.normalizer();
    let beliefs = belief_timeline(ep, paths)?;
    let intention = IntentionOneHot::new(ep.exit_b)?;
    let lane_a = find_path(paths, &ep.path_a())?.heading_at(0.0);
    let lane_b = find_path(paths, &ep.path_b())?.heading_at(0.0);
    let s_div = (RoundaboutSpec::branch_offset(ep.entry_b, ep.entry_a)
        <= RoundaboutSpec::branch_offset(ep.entry_b, ep.exit_b))
    .then(|| find_path(paths, &ep.path_b()).map(|p| p.project(spec.diverge_point(ep.entry_a)).0))
    .transpose()?;
    let joint = |k: usize| -> [f64; JOINT_DIM] {
        let a = norm.to_model(ep.car_a.samples()[k].pos);
        let b = norm.to_model(ep.car_b.samples()[k].pos);
        [a.x, a.y, b.x, b.y]
    };
    let mut out = Vec::with_capacity(len - t1 - t2 + 1);
    for w in 0..=len - t1 - t2 {
        let present = w + t1 - 1;
        let past: Vec<f64> = (w..w + t1).flat_map(joint).collect();
        let future: Vec<f64> = (w + t1..w + t1 + t2).flat_map(joint).collect();
        let mut env = Vec::with_capacity(ENV_DIM);
        env.extend(front_features(&ep.car_a, ep.front_a.as_ref(), present, lane_a, &norm));
        env.extend(front_features(&ep.car_b, ep.front_b.as_ref(), present, lane_b, &norm));
        let features = FeatureVector::new(Tensor::matrix(t1, JOINT_DIM, past)?, Tensor::vector(env), intention)?;
        let bimodal =
            s_div.is_some_and(|s| ep.progress_b[present] < s && ep.progress_b[present + t2] >= s + BIMODAL_REVEAL);
        out.push(Window {
            meta: WindowMeta {
                case_id: ep.case_id.clone(),
                index: w,
                t: ep.car_b.samples()[present].t,
                entry_a: ep.entry_a,
                entry_b: ep.entry_b,
                exit_b: ep.exit_b,
                label: ep.label,
                bimodal,
            },
            example: Example { features, future: Tensor::matrix(t2, JOINT_DIM, future)?, belief: beliefs[present] },
        });
    }
    Ok(out)
}

/// Which of the two behaviours a joint future sample shows for car B:
/// `false` if it is closer to leaving at A's branch, `true` if closer to
/// continuing past it. Positions are in model units.
pub fn passes_a(sample: &Tensor, meta: &WindowMeta, paths: &[ReferencePath], norm: &Normalizer) -> Result<bool> {
    let exit_early = find_path(paths, &route_id(meta.entry_b, meta.entry_a))?;
    let next = (meta.entry_a + 1) % BRANCH_COUNT as u8;
    let continue_on = find_path(paths, &route_id(meta.entry_b, next))?;
    let (mut d_exit, mut d_cont) = (0.0, 0.0);
    for row in sample.data().chunks(JOINT_DIM) {
        let b = norm.to_world(Point2::new(row[2], row[3]));
        d_exit += exit_early.distance_to(b);
        d_cont += continue_on.distance_to(b);
    }
    Ok(d_cont < d_exit)
}

/// Test windows carry the tracker's argmax branch instead of the true exit;
/// the true exit stays in the metadata.
pub fn with_inferred_intention(mut w: Window) -> Window {
    let best = (0..BRANCH_COUNT).fold(0, |b, i| if w.example.belief[i] > w.example.belief[b] { i } else { b });
    w.example.features.intention = IntentionOneHot::new(best as u8).expect("branch index in range");
    w
}

/// Generates `n_cases` episodes with pass/yield labels balanced to the
/// configured ratio, splits them by case and extracts windows.
pub fn generate_dataset(spec: &RoundaboutSpec, config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let paths = build_reference_paths(spec)?;
    let root = SeedStream::new(config.seed);

    let n = config.n_cases;
    let n_pass = (n as f64 * config.scenario.pass_probability).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_pass { Label::Pass } else { Label::Yield }).collect();
    labels.shuffle(&mut root.derive("labels").rng());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut root.derive("split").rng());
    let n_train = ((n as f64 * config.split_ratio).round() as usize).clamp(1, n - 1);
    let mut split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let cases = root.derive("episode");
    let mut episodes = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..n {
        let case_id = format!("case{i:04}");
        let params = ScenarioParams { label: Some(labels[i]), ..config.scenario.clone() };
        let (ep, seed) = first_valid(spec, &paths, &params, &case_id, &cases.index(i as u64))?;
        let windows = episode_windows(&ep, spec, &paths, config.t1, config.t2)?;
        records.push(CaseRecord {
            case_id: case_id.clone(),
            seed,
            label: ep.label,
            entry_a: ep.entry_a,
            exit_a: ep.exit_a,
            entry_b: ep.entry_b,
            exit_b: ep.exit_b,
            interacts: ep.interacts,
            split: split[i],
            windows: windows.len(),
        });
        match split[i] {
            Split::Train => train.extend(windows),
            Split::Test => test.extend(windows.into_iter().map(with_inferred_intention)),
        }
        episodes.push(ep);
    }
    log::info!("generated {n} cases: {} train / {} test windows", train.len(), test.len());
    let manifest = DatasetManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config_digest: config_digest(&(config, spec)),
        config: config.clone(),
        spec: spec.clone(),
        cases: records,
        train_windows: train.len(),
        test_windows: test.len(),
    };
    Ok(Dataset { manifest, episodes, paths, normalizer: spec.normalizer(), train, test })
}

/// Retries with fresh seeds when the simulated order of the cars
/// contradicts the requested label.
fn first_valid(
    spec: &RoundaboutSpec,
    paths: &[ReferencePath],
    params: &ScenarioParams,
    case_id: &str,
    stream: &SeedStream,
) -> Result<(Episode, u64)> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = stream.index(attempt).seed();
        match generate_episode(spec, paths, params, case_id, seed) {
            Ok(ep) => return Ok((ep, seed)),
            Err(e @ Error::Dataset(_)) => {
                log::debug!("{e}; retrying");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Dataset(format!("case {case_id}: no valid episode"))))
}

const MANIFEST_FILE: &str = "manifest.json";
const EPISODES_FILE: &str = "episodes.json";
const PATHS_FILE: &str = "paths.json";
const TRAJECTORIES_FILE: &str = "trajectories.csv";

/// Writes the manifest, episodes, reference paths and a flat trajectory
/// CSV into `dir`. Windows are rebuilt from the episodes on reading.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
    serde_json::to_writer_pretty(create(MANIFEST_FILE)?, &data.manifest)?;
    serde_json::to_writer(create(EPISODES_FILE)?, &data.episodes)?;
    write_paths_json(create(PATHS_FILE)?, &data.paths)?;
    let rows = data.episodes.iter().flat_map(|ep| {
        [Some(&ep.car_a), Some(&ep.car_b), ep.front_a.as_ref(), ep.front_b.as_ref()]
            .into_iter()
            .flatten()
            .map(move |t| (ep.case_id.as_str(), t))
    });
    write_trajectories_csv(create(TRAJECTORIES_FILE)?, rows)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let open = |name: &str| -> Result<BufReader<fs::File>> {
        let p = dir.join(name);
        fs::File::open(&p).map(BufReader::new).map_err(|e| Error::Dataset(format!("cannot open {}: {e}", p.display())))
    };
    let manifest: DatasetManifest = serde_json::from_reader(open(MANIFEST_FILE)?)?;
    let episodes: Vec<Episode> = serde_json::from_reader(open(EPISODES_FILE)?)?;
    if episodes.len() != manifest.cases.len() {
        return Err(Error::Dataset("manifest and episode file disagree on the number of cases".into()));
    }
    let spec = &manifest.spec;
    let paths = build_reference_paths(spec)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ep, rec) in episodes.iter().zip(&manifest.cases) {
        if ep.case_id != rec.case_id {
            return Err(Error::Dataset(format!("episode {} out of order", ep.case_id)));
        }
        let windows = episode_windows(ep, spec, &paths, manifest.config.t1, manifest.config.t2)?;
        match rec.split {
            Split::Train => train.extend(windows),
            Split::Test => test.extend(windows.into_iter().map(with_inferred_intention)),
        }
    }
    Ok(Dataset { normalizer: spec.normalizer(), manifest, episodes, paths, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RoundaboutSpec, DatasetConfig) {
        (RoundaboutSpec::default(), DatasetConfig { n_cases: 10, ..DatasetConfig::default() })
    }

    #[test]
    fn window_count_matches_length() {
        let (spec, cfg) = small();
        let d = generate_dataset(&spec, &cfg).unwrap();
        for (ep, rec) in d.episodes.iter().zip(&d.manifest.cases) {
            assert_eq!(rec.windows, ep.car_a.len() - (cfg.t1 + cfg.t2) + 1);
        }
    }

    #[test]
    fn split_is_80_20() {
        let (spec, cfg) = small();
        let d = generate_dataset(&spec, &cfg).unwrap();
        let train = d.manifest.cases.iter().filter(|c| c.split == Split::Train).count();
        assert_eq!(train, 8);
    }

    #[test]
    fn too_few_cases_rejected() {
        let (spec, mut cfg) = small();
        cfg.n_cases = 5;
        assert!(generate_dataset(&spec, &cfg).is_err());
    }

    #[test]
    fn round_trip_through_files() {
        let (spec, cfg) = small();
        let d = generate_dataset(&spec, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("ipred-ds-{}", std::process::id()));
        write_dataset(&dir, &d).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.train, d.train);
        assert_eq!(back.test, d.test);
        fs::remove_dir_all(&dir).unwrap();
    }
}
