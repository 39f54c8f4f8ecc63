//! Dynamic time warping between point sequences.
//!
//! The local cost is the Euclidean distance between positions, the step
//! pattern is the classical symmetric one (advance `i`, `j`, or both), and
//! there is no warping window. Sequences compared here are short, so the
//! full `O(nm)` table is cheap.

use crate::error::{Error, Result};
use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// Sum of local distances along the optimal warping path.
    pub cost: f64,
    /// Index pairs `(i, j)` from `(0, 0)` to `(n - 1, m - 1)`.
    pub path: Vec<(usize, usize)>,
}

/// Optimal alignment cost and warping path between `a` and `b`.
///
/// When several predecessors tie, the backtrack prefers the diagonal step,
/// then the step that advanced `i`, then the one that advanced `j`.
pub fn dtw_distance(a: &[Point2], b: &[Point2]) -> Result<DtwResult> {
    let acc = accumulate(a, b)?;
    let m = b.len();
    let at = |i: usize, j: usize| acc[i * m + j];

    let (mut i, mut j) = (a.len() - 1, m - 1);
    let mut path = vec![(i, j)];
    while (i, j) != (0, 0) {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = at(i - 1, j - 1);
            let up = at(i - 1, j);
            let left = at(i, j - 1);
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult { cost: at(a.len() - 1, m - 1), path })
}

/// Alignment cost only; skips the backtrack.
pub fn dtw_cost(a: &[Point2], b: &[Point2]) -> Result<f64> {
    let acc = accumulate(a, b)?;
    Ok(acc[acc.len() - 1])
}

fn accumulate(a: &[Point2], b: &[Point2]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("dtw needs two non-empty sequences".into()));
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = a[i].dist(b[j]);
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * m],
                _ => acc[(i - 1) * m + j - 1].min(acc[(i - 1) * m + j]).min(acc[i * m + j - 1]),
            };
            acc[i * m + j] = prev + d;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn identical_sequences_cost_zero() {
        let s = pts(&[(0.0, 0.0), (1.0, 2.0), (3.0, -1.0)]);
        let r = dtw_distance(&s, &s).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn single_pair_is_euclidean() {
        let r = dtw_distance(&pts(&[(0.0, 0.0)]), &pts(&[(3.0, 4.0)])).unwrap();
        assert_eq!(r.cost, 5.0);
        assert_eq!(r.path, vec![(0, 0)]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(dtw_distance(&[], &pts(&[(0.0, 0.0)])).is_err());
        assert!(dtw_cost(&pts(&[(0.0, 0.0)]), &[]).is_err());
    }

    #[test]
    fn path_steps_are_unit_moves() {
        let a = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let b = pts(&[(0.0, 0.1), (3.0, 0.1)]);
        let r = dtw_distance(&a, &b).unwrap();
        assert_eq!(r.path.first(), Some(&(0, 0)));
        assert_eq!(r.path.last(), Some(&(3, 1)));
        for w in r.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
        let along: f64 = r.path.iter().map(|&(i, j)| a[i].dist(b[j])).sum();
        assert!((along - r.cost).abs() < 1e-12);
    }

    #[test]
    fn displacing_a_point_away_never_lowers_cost() {
        let a = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let mut b = pts(&[(0.0, 0.5), (1.0, 0.5), (2.0, 0.5)]);
        let base = dtw_cost(&a, &b).unwrap();
        b[1] = Point2::new(1.0, 3.0);
        let farther = dtw_cost(&a, &b).unwrap();
        assert!(farther >= base);
    }
}
