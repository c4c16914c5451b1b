//! Exact nearest neighbours and the symmetric Chamfer distance.

use rayon::prelude::*;

use super::vec3::{self, Point};
use super::GeometryError;

/// Static 3-d tree over a point set, stored as an implicitly balanced
/// array: the median of each range is its node, split axis cycles x, y, z.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut pts = points.to_vec();
        build(&mut pts, 0);
        Self { points: pts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the closest stored point (∞ when empty).
    pub fn nearest_dist2(&self, q: Point) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn build(pts: &mut [Point], depth: usize) {
    if pts.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, right) = pts.split_at_mut(mid);
    build(left, depth + 1);
    build(&mut right[1..], depth + 1);
}

fn search(pts: &[Point], depth: usize, q: Point, best: &mut f64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let p = pts[mid];
    let d = vec3::dist2(q, p);
    if d < *best {
        *best = d;
    }
    let axis = depth % 3;
    let diff = q[axis] - p[axis];
    let (near, far) = if diff < 0.0 {
        (&pts[..mid], &pts[mid + 1..])
    } else {
        (&pts[mid + 1..], &pts[..mid])
    };
    search(near, depth + 1, q, best);
    if diff * diff < *best {
        search(far, depth + 1, q, best);
    }
}

/// Mean over `from` of the distance to the nearest point of `to`.
pub fn mean_nearest_distance(from: &[Point], to: &KdTree) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest_dist2(*p).sqrt()).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// `½(mean_a min_b |a-b| + mean_b min_a |a-b|)`, unsquared.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::Empty("chamfer distance of an empty cloud".into()));
    }
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(0.5 * (mean_nearest_distance(a, &tb) + mean_nearest_distance(b, &ta)))
}
