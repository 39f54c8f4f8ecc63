//! Synthetic single-lane roundabout with eight branches.
//!
//! Circulation is counter-clockwise. In each branch the entry lane lies on
//! the counter-clockwise side of the branch axis and the exit lane on the
//! other side, both `lane_offset` from it. Entry and exit curves are circular
//! fillets tangent to their lane and externally tangent to the ring.

mod dataset;
mod sim;

pub use dataset::{
    belief_timeline, episode_windows, generate_dataset, passes_a, read_dataset, with_inferred_intention, write_dataset,
    CaseRecord, Dataset, DatasetConfig, DatasetManifest, Split, Window, WindowMeta, SENTINEL_DISTANCE,
};
pub use sim::{generate_episode, intention_at_pre_exit, Episode, Label, ScenarioParams};

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::cvae::Normalizer;
use crate::error::{Error, Result};
use crate::geometry::{Point2, ReferencePath};
use crate::intention::BRANCH_COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundaboutSpec {
    pub center: Point2,
    /// Radius of the circulating lane's centreline.
    pub ring_radius: f64,
    pub branch_count: usize,
    pub branch_angles: Vec<f64>,
    /// Lateral distance of entry and exit lanes from the branch axis.
    pub lane_offset: f64,
    pub fillet_radius: f64,
    pub approach_length: f64,
    pub exit_length: f64,
    /// Vertex spacing along curves.
    pub point_spacing: f64,
    /// `(entry, exit)` branch pairs with a reference path.
    pub routes: Vec<(u8, u8)>,
}

impl Default for RoundaboutSpec {
    fn default() -> Self {
        let routes =
            [(0u8, [1u8, 2, 3, 4, 5].as_slice()), (2, &[3, 4, 5, 6, 7]), (4, &[5, 6, 7, 0, 1]), (6, &[7, 0, 1, 2])]
                .iter()
                .flat_map(|&(e, xs)| xs.iter().map(move |&x| (e, x)))
                .collect();
        RoundaboutSpec {
            center: Point2::new(0.0, 0.0),
            ring_radius: 18.0,
            branch_count: BRANCH_COUNT,
            branch_angles: (0..BRANCH_COUNT).map(|k| k as f64 * PI / 4.0).collect(),
            lane_offset: 1.8,
            fillet_radius: 5.0,
            approach_length: 30.0,
            exit_length: 100.0,
            point_spacing: 0.5,
            routes,
        }
    }
}

impl RoundaboutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branch_count != BRANCH_COUNT || self.branch_angles.len() != BRANCH_COUNT {
            return Err(Error::InvalidArgument(format!("roundabout needs exactly {BRANCH_COUNT} branches")));
        }
        let angles_ok = self.branch_angles.iter().all(|a| (0.0..TAU).contains(a))
            && self.branch_angles.windows(2).all(|w| w[0] < w[1]);
        if !angles_ok {
            return Err(Error::InvalidArgument("branch angles must increase strictly within [0, 2pi)".into()));
        }
        let positive = [
            self.ring_radius,
            self.lane_offset,
            self.fillet_radius,
            self.approach_length,
            self.exit_length,
            self.point_spacing,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("roundabout dimensions must be positive".into()));
        }
        let min_gap = (0..BRANCH_COUNT)
            .map(|k| {
                let next = self.branch_angles[(k + 1) % BRANCH_COUNT] + if k + 1 == BRANCH_COUNT { TAU } else { 0.0 };
                next - self.branch_angles[k]
            })
            .fold(f64::INFINITY, f64::min);
        if 2.0 * self.merge_angle() >= min_gap {
            return Err(Error::InvalidArgument("fillets of neighbouring branches overlap on the ring".into()));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer { center: self.center, scale: self.ring_radius }
    }

    /// Distance along the branch axis of the fillet centres.
    fn fillet_axis_offset(&self) -> f64 {
        let (r, rho, w) = (self.ring_radius, self.fillet_radius, self.lane_offset);
        ((r + rho).powi(2) - (w + rho).powi(2)).sqrt()
    }

    /// Angle between a branch axis and the point where its fillets touch the
    /// ring.
    pub fn merge_angle(&self) -> f64 {
        (self.lane_offset + self.fillet_radius).atan2(self.fillet_axis_offset())
    }

    fn unit(&self, branch: u8) -> (Point2, Point2) {
        let a = self.branch_angles[branch as usize];
        (Point2::new(a.cos(), a.sin()), Point2::new(-a.sin(), a.cos()))
    }

    /// World point at `(u, v)` in a branch frame (u outward, v
    /// counter-clockwise).
    fn branch_point(&self, branch: u8, u: f64, v: f64) -> Point2 {
        let (r, t) = self.unit(branch);
        self.center.add(r.scale(u)).add(t.scale(v))
    }

    pub fn ring_point(&self, angle: f64) -> Point2 {
        self.center.add(Point2::new(angle.cos(), angle.sin()).scale(self.ring_radius))
    }

    /// Where a car entering from `branch` joins the ring; this is also where
    /// it can meet circulating traffic.
    pub fn merge_point(&self, branch: u8) -> Point2 {
        self.ring_point(self.branch_angles[branch as usize] + self.merge_angle())
    }

    /// Where a car leaving at `branch` departs the ring.
    pub fn diverge_point(&self, branch: u8) -> Point2 {
        self.ring_point(self.branch_angles[branch as usize] - self.merge_angle())
    }

    /// Yield line of an entry: start of the entry curve.
    pub fn yield_point(&self, branch: u8) -> Point2 {
        self.branch_point(branch, self.fillet_axis_offset(), self.lane_offset)
    }

    /// End of the exit curve, where the exit lane straightens out.
    pub fn pre_exit_point(&self, branch: u8) -> Point2 {
        self.branch_point(branch, self.fillet_axis_offset(), -self.lane_offset)
    }

    /// Counter-clockwise branch offset from `from` to `to`, in `1..=7`.
    pub fn branch_offset(from: u8, to: u8) -> u8 {
        (to + BRANCH_COUNT as u8 - from) % BRANCH_COUNT as u8
    }

    fn arc(&self, center: Point2, radius: f64, from: f64, to: f64) -> Vec<Point2> {
        let n = ((radius * (to - from).abs() / self.point_spacing).ceil() as usize).max(1);
        (0..=n)
            .map(|i| {
                let a = from + (to - from) * i as f64 / n as f64;
                center.add(Point2::new(a.cos(), a.sin()).scale(radius))
            })
            .collect()
    }

    fn line(&self, a: Point2, b: Point2) -> Vec<Point2> {
        let n = ((a.dist(b) / (4.0 * self.point_spacing)).ceil() as usize).max(1);
        (0..=n).map(|i| a.lerp(b, i as f64 / n as f64)).collect()
    }

    /// Polyline of one route: approach, entry curve, ring arc, exit curve,
    /// exit leg.
    pub fn route_polyline(&self, entry: u8, exit: u8) -> Result<Vec<Point2>> {
        if entry as usize >= BRANCH_COUNT || exit as usize >= BRANCH_COUNT {
            return Err(Error::InvalidArgument(format!("branch index out of range in route {entry}->{exit}")));
        }
        if entry == exit {
            return Err(Error::InvalidArgument(format!("route {entry}->{exit} is a U-turn")));
        }
        let (uc, w, rho) = (self.fillet_axis_offset(), self.lane_offset, self.fillet_radius);
        let phi = self.merge_angle();
        let (re, te) = self.unit(entry);
        let (rx, tx) = self.unit(exit);
        let to_world = |r: Point2, t: Point2, p: Point2| self.center.add(r.scale(p.x)).add(t.scale(p.y));

        let mut pts =
            self.line(self.branch_point(entry, uc + self.approach_length, w), self.branch_point(entry, uc, w));
        let c_in = Point2::new(uc, w + rho);
        pts.extend(self.arc(c_in, rho, -FRAC_PI_2, -PI + phi).into_iter().map(|p| to_world(re, te, p)));

        let a0 = self.branch_angles[entry as usize] + phi;
        let mut a1 = self.branch_angles[exit as usize] - phi;
        while a1 <= a0 {
            a1 += TAU;
        }
        pts.extend(self.arc(self.center, self.ring_radius, a0, a1));

        let c_out = Point2::new(uc, -(w + rho));
        pts.extend(self.arc(c_out, rho, PI - phi, FRAC_PI_2).into_iter().map(|p| to_world(rx, tx, p)));
        pts.extend(self.line(self.branch_point(exit, uc, -w), self.branch_point(exit, uc + self.exit_length, -w)));
        Ok(pts)
    }
}

pub fn route_id(entry: u8, exit: u8) -> String {
    format!("e{entry}x{exit}")
}

/// Reference paths for every configured route.
pub fn build_reference_paths(spec: &RoundaboutSpec) -> Result<Vec<ReferencePath>> {
    spec.validate()?;
    spec.routes.iter().map(|&(e, x)| ReferencePath::new(route_id(e, x), e, x, spec.route_polyline(e, x)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_19_routes() {
        let spec = RoundaboutSpec::default();
        assert_eq!(build_reference_paths(&spec).unwrap().len(), 19);
    }

    #[test]
    fn u_turn_rejected() {
        let spec = RoundaboutSpec { routes: vec![(3, 3)], ..RoundaboutSpec::default() };
        assert!(build_reference_paths(&spec).is_err());
    }

    #[test]
    fn polyline_is_smooth() {
        // no kinks: consecutive headings differ by little
        let spec = RoundaboutSpec::default();
        for p in build_reference_paths(&spec).unwrap() {
            let pts = p.polyline();
            for w in pts.windows(3) {
                let (d0, d1) = (w[1].sub(w[0]), w[2].sub(w[1]));
                let turn = d0.cross(d1).atan2(d0.dot(d1)).abs();
                assert!(turn < 0.2, "{} turns {turn} rad", p.id());
            }
        }
    }

    #[test]
    fn bad_angles_rejected() {
        let mut spec = RoundaboutSpec::default();
        spec.branch_angles.swap(1, 2);
        assert!(spec.validate().is_err());
    }
}
