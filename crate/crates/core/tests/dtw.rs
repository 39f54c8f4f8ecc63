use ipred::dtw::{dtw_cost, dtw_distance};
use ipred::geometry::Point2;
use ipred::rng::SeedStream;
use proptest::prelude::*;
use rand::Rng as _;

/// Minimum over every monotone warping path, each summed from the start.
fn brute_force(a: &[Point2], b: &[Point2]) -> f64 {
    fn walk(a: &[Point2], b: &[Point2], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = a[i].dist(b[j]) + acc;
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn random_seq(n: usize, rng: &mut impl rand::Rng) -> Vec<Point2> {
    (0..n).map(|_| Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect()
}

#[test]
fn matches_exhaustive_enumeration() {
    let mut rng = SeedStream::new(1).rng();
    for _ in 0..500 {
        let a = random_seq(rng.random_range(1..=6), &mut rng);
        let b = random_seq(rng.random_range(1..=6), &mut rng);
        let r = dtw_distance(&a, &b).unwrap();
        assert_eq!(r.cost, brute_force(&a, &b));
        assert_eq!(dtw_cost(&a, &b).unwrap(), r.cost);
    }
}

#[test]
fn path_cost_sums_to_result() {
    let mut rng = SeedStream::new(2).rng();
    for _ in 0..100 {
        let a = random_seq(rng.random_range(1..=8), &mut rng);
        let b = random_seq(rng.random_range(1..=8), &mut rng);
        let r = dtw_distance(&a, &b).unwrap();
        let along: f64 = r.path.iter().map(|&(i, j)| a[i].dist(b[j])).sum();
        assert!((along - r.cost).abs() < 1e-9);
    }
}

fn seq() -> impl Strategy<Value = Vec<Point2>> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y)| Point2::new(x, y)), 1..10)
}

proptest! {
    #[test]
    fn symmetric(a in seq(), b in seq()) {
        let ab = dtw_distance(&a, &b).unwrap().cost;
        let ba = dtw_distance(&b, &a).unwrap().cost;
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn non_negative_and_zero_on_self(a in seq(), b in seq()) {
        prop_assert!(dtw_distance(&a, &b).unwrap().cost >= 0.0);
        prop_assert_eq!(dtw_distance(&a, &a).unwrap().cost, 0.0);
    }

    #[test]
    fn path_is_monotone_and_anchored(a in seq(), b in seq()) {
        let r = dtw_distance(&a, &b).unwrap();
        prop_assert_eq!(r.path[0], (0, 0));
        prop_assert_eq!(*r.path.last().unwrap(), (a.len() - 1, b.len() - 1));
        for w in r.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(di <= 1 && dj <= 1 && di + dj >= 1);
        }
    }

    #[test]
    fn repeating_a_point_keeps_cost(a in seq(), k in 0usize..10) {
        // a sequence warps onto its own stutter at zero cost
        let k = k % a.len();
        let mut b = a.clone();
        b.insert(k, a[k]);
        prop_assert_eq!(dtw_distance(&a, &b).unwrap().cost, 0.0);
    }
}
