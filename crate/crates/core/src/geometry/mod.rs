//! Trajectories, reference paths and the polyline operations the intention
//! filter is built on.

mod io;

pub use io::{read_paths_json, read_trajectories_csv, write_paths_json, write_trajectories_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half a lane width; the default tolerance for [`paths_cross`].
pub const DEFAULT_CROSS_TOL: f64 = 1.8;

/// Shortest segment [`nearest_segment`] will return.
const MIN_SEGMENT_LEN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn lerp(self, o: Point2, u: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * u, self.y + (o.y - self.y) * u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub pos: Point2,
    pub v: f64,
}

impl Sample {
    pub fn new(t: f64, x: f64, y: f64, v: f64) -> Self {
        Sample { t, pos: Point2::new(x, y), v }
    }
}

/// Timestamped positions and speeds of one agent.
///
/// Always non-empty, with strictly increasing timestamps and non-negative
/// finite speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    agent_id: String,
    samples: Vec<Sample>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    agent_id: String,
    samples: Vec<Sample>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::new(raw.agent_id, raw.samples)
    }
}

impl Trajectory {
    pub fn new(agent_id: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let agent_id = agent_id.into();
        if samples.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let invalid = |reason: String| Error::InvalidTrajectory { agent: agent_id.clone(), reason };
        for (i, s) in samples.iter().enumerate() {
            if !(s.t.is_finite() && s.pos.is_finite() && s.v.is_finite()) {
                return Err(invalid(format!("non-finite value in sample {i}")));
            }
            if s.v < 0.0 {
                return Err(invalid(format!("negative speed {} in sample {i}", s.v)));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(invalid(format!("timestamps not increasing at sample {i}")));
            }
        }
        Ok(Trajectory { agent_id, samples })
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn positions(&self) -> Vec<Point2> {
        self.samples.iter().map(|s| s.pos).collect()
    }

    /// Samples `range` as a new trajectory. Panics if the range is empty or
    /// out of bounds.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        assert!(range.start < range.end, "empty trajectory slice");
        Trajectory { agent_id: self.agent_id.clone(), samples: self.samples[range].to_vec() }
    }

    /// Samples with `from <= t <= to` (with a small timestamp tolerance).
    pub fn between(&self, from: f64, to: f64) -> Option<Trajectory> {
        let samples: Vec<Sample> =
            self.samples.iter().filter(|s| s.t >= from - 1e-9 && s.t <= to + 1e-9).copied().collect();
        if samples.is_empty() {
            None
        } else {
            Some(Trajectory { agent_id: self.agent_id.clone(), samples })
        }
    }

    /// Sample at time `t`, if one exists within a 1 µs tolerance.
    pub fn at(&self, t: f64) -> Option<&Sample> {
        self.samples.iter().find(|s| (s.t - t).abs() < 1e-6)
    }
}

/// Keeps every `factor`-th sample starting from the first.
pub fn downsample(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let samples = traj.samples.iter().step_by(factor).copied().collect();
    Trajectory::new(traj.agent_id.clone(), samples)
}

/// Centered moving average over x, y and v. Near the ends the window shrinks
/// symmetrically, so the first and last samples are kept as-is.
pub fn smooth(traj: &Trajectory, window: usize) -> Result<Trajectory> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("smoothing window must be odd and positive, got {window}")));
    }
    let n = traj.len();
    if window > n {
        return Err(Error::InvalidArgument(format!("smoothing window {window} exceeds trajectory length {n}")));
    }
    let half = window / 2;
    let src = &traj.samples;
    let samples = (0..n)
        .map(|i| {
            let k = half.min(i).min(n - 1 - i);
            let span = &src[i - k..=i + k];
            let w = span.len() as f64;
            let (sx, sy, sv) =
                span.iter().fold((0.0, 0.0, 0.0), |(ax, ay, av), s| (ax + s.pos.x, ay + s.pos.y, av + s.v));
            Sample::new(src[i].t, sx / w, sy / w, sv / w)
        })
        .collect();
    Trajectory::new(traj.agent_id.clone(), samples)
}

/// A lane-level route from one roundabout entry to one exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    id: String,
    entry_branch: u8,
    exit_branch: u8,
    polyline: Vec<Point2>,
    cum_arclength: Vec<f64>,
}

impl ReferencePath {
    /// Builds a path, dropping repeated consecutive vertices.
    pub fn new(id: impl Into<String>, entry_branch: u8, exit_branch: u8, points: Vec<Point2>) -> Result<Self> {
        let id = id.into();
        if entry_branch > 7 || exit_branch > 7 {
            return Err(Error::InvalidArgument(format!("path `{id}`: branch indices must be in 0..8")));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("path `{id}` has non-finite vertices")));
        }
        let mut polyline: Vec<Point2> = Vec::with_capacity(points.len());
        for p in points {
            if polyline.last().is_none_or(|q| q.dist(p) > 1e-9) {
                polyline.push(p);
            }
        }
        if polyline.len() < 2 {
            return Err(Error::DegeneratePath(id));
        }
        let mut cum_arclength = Vec::with_capacity(polyline.len());
        let mut acc = 0.0;
        cum_arclength.push(0.0);
        for w in polyline.windows(2) {
            acc += w[0].dist(w[1]);
            cum_arclength.push(acc);
        }
        Ok(ReferencePath { id, entry_branch, exit_branch, polyline, cum_arclength })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entry_branch(&self) -> u8 {
        self.entry_branch
    }

    pub fn exit_branch(&self) -> u8 {
        self.exit_branch
    }

    pub fn polyline(&self) -> &[Point2] {
        &self.polyline
    }

    pub fn cum_arclength(&self) -> &[f64] {
        &self.cum_arclength
    }

    pub fn length(&self) -> f64 {
        self.cum_arclength[self.cum_arclength.len() - 1]
    }

    /// Point at arc length `s`, clamped to the path.
    pub fn point_at(&self, s: f64) -> Point2 {
        let (i, u) = self.locate(s);
        self.polyline[i].lerp(self.polyline[i + 1], u)
    }

    /// Unit tangent at arc length `s`.
    pub fn heading_at(&self, s: f64) -> Point2 {
        let (i, _) = self.locate(s);
        let d = self.polyline[i + 1].sub(self.polyline[i]);
        d.scale(1.0 / d.norm())
    }

    /// Segment index and fractional position for arc length `s`.
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let cum = &self.cum_arclength;
        // index of the last vertex with cum <= s, capped so i + 1 is valid
        let i = cum.partition_point(|&c| c <= s).saturating_sub(1).min(cum.len() - 2);
        let len = cum[i + 1] - cum[i];
        (i, ((s - cum[i]) / len).clamp(0.0, 1.0))
    }

    /// Arc-length projection of `p` and its distance to the path. Ties go to
    /// the smallest arc length.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for (i, w) in self.polyline.windows(2).enumerate() {
            let (u, d) = project_on_segment(p, w[0], w[1]);
            if d < best.1 {
                let len = self.cum_arclength[i + 1] - self.cum_arclength[i];
                best = (self.cum_arclength[i] + u * len, d);
            }
        }
        best
    }

    /// Distance from `p` to the nearest point of the path.
    pub fn distance_to(&self, p: Point2) -> f64 {
        self.project(p).1
    }

    /// Extracts the sub-polyline between two arc lengths, with interpolated
    /// end vertices.
    pub fn segment(&self, start_s: f64, end_s: f64) -> PathSegment {
        let total = self.length();
        let mut start_s = start_s.clamp(0.0, total);
        let mut end_s = end_s.clamp(0.0, total);
        if start_s > end_s {
            std::mem::swap(&mut start_s, &mut end_s);
        }
        if end_s - start_s < MIN_SEGMENT_LEN {
            if start_s + MIN_SEGMENT_LEN <= total {
                end_s = start_s + MIN_SEGMENT_LEN;
            } else {
                start_s = total - MIN_SEGMENT_LEN;
                end_s = total;
            }
        }
        let mut polyline = vec![self.point_at(start_s)];
        for (p, &c) in self.polyline.iter().zip(&self.cum_arclength) {
            if c > start_s && c < end_s {
                polyline.push(*p);
            }
        }
        polyline.push(self.point_at(end_s));
        PathSegment { path_id: self.id.clone(), start_s, end_s, polyline }
    }
}

/// Parameter `u in [0,1]` of the closest point on segment `ab`, and the distance.
fn project_on_segment(p: Point2, a: Point2, b: Point2) -> (f64, f64) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let u = if len2 > 0.0 { (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (u, p.dist(a.lerp(b, u)))
}

/// A stretch of a reference path between two arc lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    pub path_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub polyline: Vec<Point2>,
}

impl PathSegment {
    pub fn length(&self) -> f64 {
        self.polyline.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// `n` points evenly spaced in arc length along the segment, endpoints
    /// included. A single point resamples to the segment start.
    pub fn resample(&self, n: usize) -> Vec<Point2> {
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            return vec![self.polyline[0]];
        }
        let mut cum = Vec::with_capacity(self.polyline.len());
        cum.push(0.0);
        for w in self.polyline.windows(2) {
            cum.push(cum[cum.len() - 1] + w[0].dist(w[1]));
        }
        let total = cum[cum.len() - 1];
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let s = total * k as f64 / (n - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let u = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            out.push(self.polyline[seg].lerp(self.polyline[seg + 1], u));
        }
        out
    }
}

/// The part of `path` the trajectory covers, widened by `margin` on both
/// sides and clamped to the path.
pub fn nearest_segment(path: &ReferencePath, traj: &Trajectory, margin: f64) -> PathSegment {
    let (s_first, _) = path.project(traj.first().pos);
    let (s_last, _) = path.project(traj.last().pos);
    let (lo, hi) = if s_first <= s_last { (s_first, s_last) } else { (s_last, s_first) };
    let margin = margin.max(0.0);
    path.segment(lo - margin, hi + margin)
}

/// Minimum distance between segments `ab` and `cd`.
pub fn segment_distance(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    let d1 = project_on_segment(a, c, d).1;
    let d2 = project_on_segment(b, c, d).1;
    let d3 = project_on_segment(c, a, b).1;
    let d4 = project_on_segment(d, a, b).1;
    d1.min(d2).min(d3).min(d4)
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let o1 = b.sub(a).cross(c.sub(a));
    let o2 = b.sub(a).cross(d.sub(a));
    let o3 = d.sub(c).cross(a.sub(c));
    let o4 = d.sub(c).cross(b.sub(c));
    // touching and collinear cases are covered by the endpoint distances
    (o1 > 0.0 && o2 < 0.0 || o1 < 0.0 && o2 > 0.0) && (o3 > 0.0 && o4 < 0.0 || o3 < 0.0 && o4 > 0.0)
}

#[derive(Clone, Copy)]
struct Aabb {
    min: Point2,
    max: Point2,
}

impl Aabb {
    fn of(a: Point2, b: Point2) -> Self {
        Aabb { min: Point2::new(a.x.min(b.x), a.y.min(b.y)), max: Point2::new(a.x.max(b.x), a.y.max(b.y)) }
    }

    fn within(&self, o: &Aabb, tol: f64) -> bool {
        self.min.x - tol <= o.max.x
            && o.min.x - tol <= self.max.x
            && self.min.y - tol <= o.max.y
            && o.min.y - tol <= self.max.y
    }
}

/// True iff some segment of `a` passes within `tol` of some segment of `b`.
pub fn paths_cross(a: &ReferencePath, b: &ReferencePath, tol: f64) -> bool {
    let boxes_b: Vec<Aabb> = b.polyline.windows(2).map(|w| Aabb::of(w[0], w[1])).collect();
    a.polyline.windows(2).any(|wa| {
        let box_a = Aabb::of(wa[0], wa[1]);
        b.polyline
            .windows(2)
            .zip(&boxes_b)
            .any(|(wb, box_b)| box_a.within(box_b, tol) && segment_distance(wa[0], wa[1], wb[0], wb[1]) <= tol)
    })
}
