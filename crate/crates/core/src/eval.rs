//! Surface sampling and the symmetric Chamfer distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloth::Vec3;
use crate::par;
use crate::{Error, Result};

/// Points drawn uniformly over the surface of a triangle mesh.
///
/// Triangles are picked with probability proportional to their area, then a point is drawn
/// uniformly inside. The same seed gives the same cloud.
pub fn sample_surface(positions: &[Vec3], faces: &[[usize; 3]], n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let mut cdf = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        let [a, b, c] = f.map(|k| positions[k]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cdf.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("mesh has no area to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let fi = cdf.partition_point(|&c| c <= r).min(faces.len() - 1);
            let [a, b, c] = faces[fi].map(|k| positions[k]);
            let (mut s, mut t) = (rng.gen::<f64>(), rng.gen::<f64>());
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            a + (b - a) * s + (c - a) * t
        })
        .collect();
    Ok(pts)
}

/// Static 3-d tree for exact nearest-neighbour queries.
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree over `points`: the median of each range is its node.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axes, 0);
        Self { points: pts, axes }
    }

    fn build(pts: &mut [Vec3], axes: &mut [u8], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let (lo, hi) = pts.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let axis = (hi - lo).imax();
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        let (l, r) = pts.split_at_mut(mid);
        let (al, ar) = axes.split_at_mut(mid);
        Self::build(l, al, depth + 1);
        Self::build(&mut r[1..], &mut ar[1..], depth + 1);
    }

    /// Squared distance from `q` to its nearest point.
    pub fn nearest_dist2(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &Vec3, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn mean_nearest(from: &[Vec3], to: &KdTree) -> f64 {
    let d = par::map(from, |p| to.nearest_dist2(p));
    d.iter().sum::<f64>() / from.len() as f64
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two nonempty clouds"));
    }
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    Ok(mean_nearest(a, &tb) + mean_nearest(b, &ta))
}

/// The double loop the tree must agree with.
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    one(a, b) + one(b, a)
}
