//! Intention inference: DTW likelihoods against reference-path segments,
//! recursive Bayesian updates of the per-vehicle belief, and selection of
//! vehicle pairs whose plausible routes interact.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dtw::dtw_cost;
use crate::error::{Error, Result};
use crate::geometry::{nearest_segment, paths_cross, PathSegment, ReferencePath, Trajectory};

pub const BRANCH_COUNT: usize = 8;

/// Minimum time between two belief updates of the same vehicle.
pub const UPDATE_INTERVAL: f64 = 0.4;

/// Default posterior mass for a path to count as plausible in pair selection.
pub const DEFAULT_PROB_THRESHOLD: f64 = 0.05;

const SUM_TOL: f64 = 1e-9;
const TIME_TOL: f64 = 1e-9;

/// Probability vector over a labelled set of hypotheses (reference paths or
/// exit branches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionBelief {
    vehicle_id: String,
    hypotheses: Vec<String>,
    probs: Vec<f64>,
    last_update_t: f64,
}

impl IntentionBelief {
    pub fn new(
        vehicle_id: impl Into<String>,
        hypotheses: Vec<String>,
        probs: Vec<f64>,
        last_update_t: f64,
    ) -> Result<Self> {
        if hypotheses.is_empty() || hypotheses.len() != probs.len() {
            return Err(Error::InvalidBelief(format!(
                "{} hypotheses for {} probabilities",
                hypotheses.len(),
                probs.len()
            )));
        }
        check_distribution(&probs)?;
        Ok(IntentionBelief { vehicle_id: vehicle_id.into(), hypotheses, probs, last_update_t })
    }

    pub fn uniform(vehicle_id: impl Into<String>, hypotheses: Vec<String>, t: f64) -> Result<Self> {
        let n = hypotheses.len().max(1);
        let probs = vec![1.0 / n as f64; hypotheses.len()];
        Self::new(vehicle_id, hypotheses, probs, t)
    }

    pub fn vehicle_id(&self) -> &str {
        &self.vehicle_id
    }

    pub fn hypotheses(&self) -> &[String] {
        &self.hypotheses
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn last_update_t(&self) -> f64 {
        self.last_update_t
    }

    pub fn prob_of(&self, hypothesis: &str) -> Option<f64> {
        self.hypotheses.iter().position(|h| h == hypothesis).map(|i| self.probs[i])
    }

    /// Index of the most probable hypothesis; ties go to the first.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidBelief("entries must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidBelief(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Label used for exit-branch hypotheses.
pub fn branch_label(branch: u8) -> String {
    format!("exit{branch}")
}

/// One-hot encoding of an exit branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntentionOneHot(u8);

impl IntentionOneHot {
    pub fn new(branch: u8) -> Result<Self> {
        if (branch as usize) < BRANCH_COUNT {
            Ok(IntentionOneHot(branch))
        } else {
            Err(Error::InvalidArgument(format!("exit branch {branch} out of range")))
        }
    }

    pub fn branch(&self) -> u8 {
        self.0
    }

    pub fn to_array(&self) -> [f64; BRANCH_COUNT] {
        let mut v = [0.0; BRANCH_COUNT];
        v[self.0 as usize] = 1.0;
        v
    }

    /// One-hot of the most probable branch of a branch-level belief.
    pub fn from_branch_belief(belief: &IntentionBelief) -> Result<Self> {
        if belief.hypotheses.len() != BRANCH_COUNT {
            return Err(Error::InvalidBelief("expected a belief over 8 exit branches".into()));
        }
        Self::new(belief.argmax() as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub vehicle_a: String,
    pub vehicle_b: String,
    /// Plausible `(path of a, path of b)` combinations that come within the
    /// crossing tolerance of each other.
    pub crossing_paths: Vec<(String, String)>,
}

/// Softmax of negated DTW costs, `exp(-D_i) / sum_j exp(-D_j)`.
pub fn likelihood_from_costs(costs: &[f64]) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("no candidate paths".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("non-finite DTW cost".into()));
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = costs.iter().map(|c| (min - c).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Likelihood of each candidate segment given the observed trajectory.
///
/// Each segment is resampled to as many points as `h` has samples before the
/// DTW comparison, so the cost does not depend on how densely the reference
/// path was digitized.
pub fn dtw_likelihood(h: &Trajectory, candidates: &[PathSegment]) -> Result<Vec<f64>> {
    likelihood_from_costs(&segment_costs(h, candidates)?)
}

/// DTW cost of `h` against each candidate segment, resampled to `h`'s length.
pub fn segment_costs(h: &Trajectory, candidates: &[PathSegment]) -> Result<Vec<f64>> {
    let observed = h.positions();
    candidates.iter().map(|seg| dtw_cost(&observed, &seg.resample(observed.len()))).collect()
}

/// Posterior `likelihood_i * prior_i / sum_j likelihood_j * prior_j`.
pub fn bayes_update(prior: &IntentionBelief, likelihood: &[f64]) -> Result<IntentionBelief> {
    if likelihood.len() != prior.probs.len() {
        return Err(Error::Shape(format!(
            "likelihood has {} entries, prior has {}",
            likelihood.len(),
            prior.probs.len()
        )));
    }
    if likelihood.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidArgument("likelihood entries must be finite and >= 0".into()));
    }
    let joint: Vec<f64> = likelihood.iter().zip(&prior.probs).map(|(l, p)| l * p).collect();
    let z: f64 = joint.iter().sum();
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::ContradictoryEvidence);
    }
    Ok(IntentionBelief { probs: joint.into_iter().map(|j| j / z).collect(), ..prior.clone() })
}

/// Recursive intention filter for one vehicle.
///
/// Each update uses only the samples observed since the previous update
/// (the previous sample included as anchor), so evidence is never counted
/// twice. Updates happen at most every [`UPDATE_INTERVAL`] seconds.
#[derive(Debug, Clone)]
pub struct IntentionTracker {
    candidates: Vec<ReferencePath>,
    belief: IntentionBelief,
    margin: f64,
    min_interval: f64,
    last_costs: Vec<f64>,
}

impl IntentionTracker {
    /// Starts from a uniform prior over the candidate paths.
    pub fn new(vehicle_id: impl Into<String>, candidates: Vec<ReferencePath>, start_t: f64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("tracker needs candidate paths".into()));
        }
        let ids = candidates.iter().map(|p| p.id().to_string()).collect();
        let belief = IntentionBelief::uniform(vehicle_id, ids, start_t)?;
        let n = candidates.len();
        Ok(IntentionTracker {
            candidates,
            belief,
            margin: 0.0,
            min_interval: UPDATE_INTERVAL,
            last_costs: vec![0.0; n],
        })
    }

    /// Tracker over every path that starts at `entry_branch`.
    pub fn for_entry(
        vehicle_id: impl Into<String>,
        paths: &[ReferencePath],
        entry_branch: u8,
        start_t: f64,
    ) -> Result<Self> {
        let candidates: Vec<ReferencePath> =
            paths.iter().filter(|p| p.entry_branch() == entry_branch).cloned().collect();
        Self::new(vehicle_id, candidates, start_t)
    }

    /// Arc-length margin added around the projected observation when
    /// extracting candidate segments.
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn belief(&self) -> &IntentionBelief {
        &self.belief
    }

    /// Copy of the current belief for concurrent readers.
    pub fn snapshot(&self) -> IntentionBelief {
        self.belief.clone()
    }

    pub fn candidates(&self) -> &[ReferencePath] {
        &self.candidates
    }

    /// DTW costs of the most recent update, one per candidate.
    pub fn last_costs(&self) -> &[f64] {
        &self.last_costs
    }

    /// Feeds the trajectory observed so far. Returns whether the belief was
    /// updated.
    pub fn step(&mut self, observed: &Trajectory, now: f64) -> Result<bool> {
        let last = self.belief.last_update_t;
        if now - last < self.min_interval - TIME_TOL {
            return Ok(false);
        }
        let Some(h) = observed.between(last, now) else {
            return Ok(false);
        };
        let segments: Vec<PathSegment> = self.candidates.iter().map(|p| nearest_segment(p, &h, self.margin)).collect();
        let costs = segment_costs(&h, &segments)?;
        let likelihood = likelihood_from_costs(&costs)?;
        let mut next = bayes_update(&self.belief, &likelihood)?;
        next.last_update_t = now;
        self.belief = next;
        self.last_costs = costs;
        Ok(true)
    }
}

/// Functional form of [`IntentionTracker::step`].
pub fn track_step(
    mut tracker: IntentionTracker,
    observed: &Trajectory,
    now: f64,
) -> Result<(IntentionTracker, IntentionBelief)> {
    tracker.step(observed, now)?;
    let belief = tracker.snapshot();
    Ok((tracker, belief))
}

/// Sums path-level probabilities per exit branch.
pub fn map_belief_to_branches(
    belief: &IntentionBelief,
    paths: &[ReferencePath],
    entry_lane: u8,
) -> Result<IntentionBelief> {
    let mut probs = vec![0.0; BRANCH_COUNT];
    for (id, &p) in belief.hypotheses.iter().zip(&belief.probs) {
        let path =
            paths.iter().find(|q| q.id() == id).ok_or_else(|| Error::InvalidBelief(format!("unknown path `{id}`")))?;
        if path.entry_branch() != entry_lane {
            return Err(Error::EntryLaneMismatch {
                path: id.clone(),
                expected: entry_lane,
                found: path.entry_branch(),
            });
        }
        probs[path.exit_branch() as usize] += p;
    }
    let labels = (0..BRANCH_COUNT as u8).map(branch_label).collect();
    IntentionBelief::new(belief.vehicle_id.clone(), labels, probs, belief.last_update_t)
}

/// Unordered vehicle pairs with at least one crossing combination of
/// plausible paths. Output is sorted and independent of input order; within
/// a pair the lexicographically smaller vehicle id comes first.
pub fn select_pairs(
    beliefs: &[IntentionBelief],
    paths: &[ReferencePath],
    prob_threshold: f64,
    tol: f64,
) -> Result<Vec<InteractionPair>> {
    if !(prob_threshold > 0.0 && prob_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("probability threshold must be in (0, 1), got {prob_threshold}")));
    }
    let table: BTreeMap<&str, &ReferencePath> = paths.iter().map(|p| (p.id(), p)).collect();
    let mut ordered: Vec<&IntentionBelief> = beliefs.iter().collect();
    ordered.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));

    let plausible = |b: &IntentionBelief| -> Result<Vec<&ReferencePath>> {
        let mut out: Vec<&ReferencePath> = Vec::new();
        for (id, &p) in b.hypotheses.iter().zip(&b.probs) {
            if p >= prob_threshold {
                let path =
                    table.get(id.as_str()).ok_or_else(|| Error::InvalidBelief(format!("unknown path `{id}`")))?;
                out.push(path);
            }
        }
        out.sort_by(|a, b| a.id().cmp(b.id()));
        Ok(out)
    };
    let sets = ordered.iter().map(|b| plausible(b)).collect::<Result<Vec<_>>>()?;

    let mut pairs = Vec::new();
    for i in 0..ordered.len() {
        for j in i + 1..ordered.len() {
            if ordered[i].vehicle_id == ordered[j].vehicle_id {
                continue;
            }
            let crossing: Vec<(String, String)> = sets[i]
                .iter()
                .flat_map(|pa| sets[j].iter().map(move |pb| (*pa, *pb)))
                .filter(|(pa, pb)| paths_cross(pa, pb, tol))
                .map(|(pa, pb)| (pa.id().to_string(), pb.id().to_string()))
                .collect();
            if !crossing.is_empty() {
                pairs.push(InteractionPair {
                    vehicle_a: ordered[i].vehicle_id.clone(),
                    vehicle_b: ordered[j].vehicle_id.clone(),
                    crossing_paths: crossing,
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Serialize)]
struct BeliefRow<'a> {
    case_id: &'a str,
    vehicle_id: &'a str,
    t: f64,
    path_id: &'a str,
    prob: f64,
}

/// Writes beliefs as `case_id,vehicle_id,t,path_id,prob` rows.
pub fn write_belief_log<'a, W, I>(writer: W, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a IntentionBelief)>,
{
    let mut w = csv::Writer::from_writer(writer);
    for (case_id, belief) in rows {
        for (h, &p) in belief.hypotheses.iter().zip(&belief.probs) {
            w.serialize(BeliefRow {
                case_id,
                vehicle_id: &belief.vehicle_id,
                t: belief.last_update_t,
                path_id: h,
                prob: p,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point2, Sample};

    fn belief(probs: &[f64]) -> IntentionBelief {
        let ids = (0..probs.len()).map(|i| format!("p{i}")).collect();
        IntentionBelief::new("v", ids, probs.to_vec(), 0.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&likelihood_from_costs(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15));
        let l = likelihood_from_costs(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(&l, &[0.75, 0.25], 1e-15));
        let l = likelihood_from_costs(&[0.0, 100.0]).unwrap();
        // exp(-100) / (1 + exp(-100)) = 3.720075976020836e-44
        assert!((l[1] - 3.720075976020836e-44).abs() < 1e-57);
        assert!((l[0] + l[1] - 1.0).abs() < 1e-15);
        assert!(likelihood_from_costs(&[]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = likelihood_from_costs(&[1.0, 2.5, 0.3]).unwrap();
        let b = likelihood_from_costs(&[101.0, 102.5, 100.3]).unwrap();
        assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn bayes_examples() {
        let post = bayes_update(&belief(&[0.5, 0.5]), &[0.8, 0.2]).unwrap();
        assert!(close(post.probs(), &[0.8, 0.2], 1e-12));
        let post = bayes_update(&belief(&[0.9, 0.1]), &[0.5, 0.5]).unwrap();
        assert!(close(post.probs(), &[0.9, 0.1], 1e-12));
        let post = bayes_update(&belief(&[0.2, 0.3, 0.5]), &[0.5, 0.4, 0.1]).unwrap();
        assert!(close(post.probs(), &[10.0 / 27.0, 12.0 / 27.0, 5.0 / 27.0], 1e-12));
    }

    #[test]
    fn bayes_errors() {
        assert!(matches!(bayes_update(&belief(&[1.0, 0.0]), &[0.0, 1.0]), Err(Error::ContradictoryEvidence)));
        assert!(bayes_update(&belief(&[0.5, 0.5]), &[1.0]).is_err());
    }

    #[test]
    fn invalid_beliefs_rejected() {
        assert!(IntentionBelief::new("v", vec!["a".into()], vec![0.9], 0.0).is_err());
        assert!(IntentionBelief::new("v", vec!["a".into(), "b".into()], vec![1.5, -0.5], 0.0).is_err());
        assert!(IntentionOneHot::new(8).is_err());
        assert_eq!(IntentionOneHot::new(3).unwrap().to_array().iter().sum::<f64>(), 1.0);
    }

    fn line_path(id: &str, entry: u8, exit: u8, from: (f64, f64), to: (f64, f64)) -> ReferencePath {
        let pts = (0..=20)
            .map(|k| {
                let u = k as f64 / 20.0;
                Point2::new(from.0 + (to.0 - from.0) * u, from.1 + (to.1 - from.1) * u)
            })
            .collect();
        ReferencePath::new(id, entry, exit, pts).unwrap()
    }

    fn moving(agent: &str, t0: f64, n: usize, f: impl Fn(f64) -> (f64, f64)) -> Trajectory {
        let samples = (0..n)
            .map(|k| {
                let t = t0 + 0.2 * k as f64;
                let (x, y) = f(t);
                Sample::new(t, x, y, 5.0)
            })
            .collect();
        Trajectory::new(agent, samples).unwrap()
    }

    #[test]
    fn tracker_respects_cadence() {
        let paths = vec![
            line_path("straight", 0, 1, (0.0, 0.0), (100.0, 0.0)),
            line_path("veer", 0, 2, (0.0, 0.0), (100.0, 30.0)),
        ];
        let mut tracker = IntentionTracker::new("v", paths, 0.0).unwrap();
        let traj = moving("v", 0.0, 10, |t| (5.0 * t, 0.0));
        let before = tracker.snapshot();
        assert!(!tracker.step(&traj, 0.2).unwrap());
        assert_eq!(tracker.snapshot(), before);
        assert!(tracker.step(&traj, 0.4).unwrap());
        assert_ne!(tracker.snapshot(), before);
        assert_eq!(tracker.belief().last_update_t(), 0.4);
        assert!(!tracker.step(&traj, 0.6).unwrap());
    }

    #[test]
    fn tracker_converges_monotonically() {
        let paths = vec![
            line_path("straight", 0, 1, (0.0, 0.0), (100.0, 0.0)),
            line_path("veer", 0, 2, (0.0, 0.0), (100.0, 30.0)),
        ];
        let traj = moving("v", 0.0, 13, |t| (5.0 * t, 0.0));
        let mut tracker = IntentionTracker::new("v", paths, 0.0).unwrap();
        let mut prev = tracker.belief().probs()[0];
        let mut updates = 0;
        for k in 1..13 {
            let now = 0.2 * k as f64;
            if tracker.step(&traj, now).unwrap() {
                updates += 1;
                let p = tracker.belief().probs()[0];
                assert!(p > prev, "belief in the followed path must grow");
                prev = p;
            }
        }
        assert!(updates >= 3);
    }

    #[test]
    fn branch_mapping() {
        let paths = vec![
            line_path("a", 0, 3, (0.0, 0.0), (1.0, 0.0)),
            line_path("b", 0, 3, (0.0, 0.0), (1.0, 1.0)),
            line_path("c", 0, 5, (0.0, 0.0), (0.0, 1.0)),
        ];
        let b = IntentionBelief::new("v", vec!["a".into(), "b".into(), "c".into()], vec![0.2, 0.3, 0.5], 1.0).unwrap();
        let m = map_belief_to_branches(&b, &paths, 0).unwrap();
        assert!((m.probs()[3] - 0.5).abs() < 1e-15);
        assert!((m.probs()[5] - 0.5).abs() < 1e-15);
        assert_eq!(m.probs()[0], 0.0);
        assert!(matches!(map_belief_to_branches(&b, &paths, 1), Err(Error::EntryLaneMismatch { .. })));
    }

    #[test]
    fn pair_selection() {
        let paths = vec![
            line_path("h1", 0, 1, (0.0, 0.0), (100.0, 0.0)),
            line_path("h2", 2, 3, (0.0, 20.0), (100.0, 20.0)),
            line_path("v1", 4, 5, (50.0, -10.0), (50.0, 10.0)),
        ];
        let only = |v: &str, id: &str| IntentionBelief::new(v, vec![id.to_string()], vec![1.0], 0.0).unwrap();
        // parallel only
        let r = select_pairs(&[only("A", "h1"), only("B", "h2")], &paths, 0.05, 1.8).unwrap();
        assert!(r.is_empty());
        // A-B cross, B-C cross, A-C parallel
        let beliefs = [only("A", "h1"), only("B", "v1"), only("C", "h2")];
        let extended = vec![paths[0].clone(), paths[2].clone(), line_path("h2", 2, 3, (0.0, 10.0), (100.0, 10.0))];
        let r = select_pairs(&beliefs, &extended, 0.05, 1.8).unwrap();
        let names: Vec<(&str, &str)> = r.iter().map(|p| (p.vehicle_a.as_str(), p.vehicle_b.as_str())).collect();
        assert_eq!(names, vec![("A", "B"), ("B", "C")]);
        let rev = [beliefs[2].clone(), beliefs[1].clone(), beliefs[0].clone()];
        assert_eq!(select_pairs(&rev, &extended, 0.05, 1.8).unwrap(), r);
        assert!(select_pairs(&beliefs, &extended, 1.0, 1.8).is_err());
    }

    #[test]
    fn belief_log_rows() {
        let b = belief(&[0.25, 0.75]);
        let mut buf = Vec::new();
        write_belief_log(&mut buf, [("c7", &b)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "case_id,vehicle_id,t,path_id,prob\nc7,v,0.0,p0,0.25\nc7,v,0.0,p1,0.75\n");
    }
}
