//! Stretch, shear and bend energies of the grid cloth, with forces and Hessians.
//!
//! Every element kernel is written once over [`Real`]: evaluated on `f64` it yields the energy
//! gradient, evaluated on [`Dual`] it yields exact directional derivatives of that gradient.
//!
//! Angle conventions:
//! * shear corner `(i, k, j)`: `u = x_i - x_k`, `v = x_j - x_k`, rest angle π/2;
//! * bend triple `(i, k, l)`: `u = x_k - x_i`, `v = x_l - x_k` (both pointing forward), rest angle 0.
//!
//! Angles are measured with `atan2(|u × v|, u · v)`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Matrix3;

use crate::cloth::{ClothParams, Vec3};
use crate::dual::{Dual, Real, V3};
use crate::par;
use crate::sparse::BlockMatrix;

/// Below this `sin θ` an angle gradient direction is undefined and its contribution is dropped.
pub const SIN_EPS: f64 = 1e-9;

/// Below this bend angle the force uses the series of `θ / sin θ`.
const SMALL_ANGLE: f64 = 1e-3;

/// Element lists of a rectangular grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub rows: usize,
    pub cols: usize,
    /// Horizontal and vertical neighbour pairs.
    pub stretch: Vec<[usize; 2]>,
    /// `(i, k, j)`: one warp and one weft edge meeting at `k`, four per quad.
    pub shear: Vec<[usize; 3]>,
    /// `(i, k, l)`: consecutive collinear vertices along a row or a column.
    pub bend: Vec<[usize; 3]>,
}

impl Topology {
    pub fn grid(rows: usize, cols: usize) -> Self {
        let id = |i: usize, j: usize| i * cols + j;
        let mut stretch = Vec::with_capacity(rows * (cols - 1) + cols * (rows - 1));
        for i in 0..rows {
            for j in 0..cols {
                if j + 1 < cols {
                    stretch.push([id(i, j), id(i, j + 1)]);
                }
                if i + 1 < rows {
                    stretch.push([id(i, j), id(i + 1, j)]);
                }
            }
        }
        let mut shear = Vec::with_capacity(4 * (rows - 1) * (cols - 1));
        for i in 0..rows - 1 {
            for j in 0..cols - 1 {
                let (p00, p01, p10, p11) = (id(i, j), id(i, j + 1), id(i + 1, j), id(i + 1, j + 1));
                shear.push([p01, p00, p10]);
                shear.push([p00, p01, p11]);
                shear.push([p00, p10, p11]);
                shear.push([p01, p11, p10]);
            }
        }
        let mut bend = Vec::new();
        for i in 0..rows {
            for j in 0..cols.saturating_sub(2) {
                bend.push([id(i, j), id(i, j + 1), id(i, j + 2)]);
            }
        }
        for j in 0..cols {
            for i in 0..rows.saturating_sub(2) {
                bend.push([id(i, j), id(i + 1, j), id(i + 2, j)]);
            }
        }
        Self { rows, cols, stretch, shear, bend }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AngleKind {
    Shear,
    Bend,
}

#[inline]
fn v3<T: Real>(p: &Vec3) -> V3<T> {
    V3(T::cst(p.x), T::cst(p.y), T::cst(p.z))
}

#[inline]
fn stretch_grad<T: Real>(a: V3<T>, b: V3<T>, k: f64) -> [V3<T>; 2] {
    let e = b - a;
    let len = e.norm2().sqrt();
    if len.value() == 0.0 {
        let z = V3(T::cst(0.0), T::cst(0.0), T::cst(0.0));
        return [z, z];
    }
    let gb = e.scale((len + -1.0) / len * k);
    [-gb, gb]
}

/// Gradient of `½ k (θ - θ0)²` with respect to the two edge vectors, or `None` for a zero-length edge.
#[inline]
fn angle_grad<T: Real>(u: V3<T>, v: V3<T>, k: f64, kind: AngleKind) -> Option<[V3<T>; 2]> {
    let nu2 = u.norm2();
    let nv2 = v.norm2();
    if nu2.value() == 0.0 || nv2.value() == 0.0 {
        return None;
    }
    let s = u.cross(v).norm2().sqrt();
    let d = u.dot(v);
    let theta = s.atan2(d);
    let nn = (nu2 * nv2).sqrt();
    let sin = s.value() / nn.value();
    let zero = V3(T::cst(0.0), T::cst(0.0), T::cst(0.0));
    // q = k (θ - θ0) / |u × v|
    let q = match kind {
        AngleKind::Bend if theta.value() < SMALL_ANGLE => {
            let t2 = theta * theta;
            (t2 * (1.0 / 6.0) + t2 * t2 * (7.0 / 360.0) + 1.0) * k / nn
        }
        _ if sin < SIN_EPS => return Some([zero, zero]),
        AngleKind::Bend => theta * k / s,
        AngleKind::Shear => (theta + -FRAC_PI_2) * k / s,
    };
    let gu = (u.scale(d / nu2) - v).scale(q);
    let gv = (v.scale(d / nv2) - u).scale(q);
    Some([gu, gv])
}

#[inline]
fn shear_grad<T: Real>(xi: V3<T>, xk: V3<T>, xj: V3<T>, k: f64) -> Option<[V3<T>; 3]> {
    let [gu, gv] = angle_grad(xi - xk, xj - xk, k, AngleKind::Shear)?;
    Some([gu, -(gu + gv), gv])
}

#[inline]
fn bend_grad<T: Real>(xi: V3<T>, xk: V3<T>, xl: V3<T>, k: f64) -> Option<[V3<T>; 3]> {
    let [gu, gv] = angle_grad(xk - xi, xl - xk, k, AngleKind::Bend)?;
    Some([-gu, gu - gv, gv])
}

fn angle(u: &Vec3, v: &Vec3) -> Option<f64> {
    if u.norm_squared() == 0.0 || v.norm_squared() == 0.0 {
        return None;
    }
    Some(u.cross(v).norm().atan2(u.dot(v)))
}

/// Per-term energies plus the number of degenerate (zero-length edge) angle elements.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub stretch: f64,
    pub shear: f64,
    pub bend: f64,
    pub degenerate: usize,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.stretch + self.shear + self.bend
    }
}

/// `Σ ½ Y (|e| - 1)²` over all stretch edges.
pub fn stretch_energy(x: &[Vec3], stretch: f64, topo: &Topology) -> f64 {
    topo.stretch
        .iter()
        .map(|&[a, b]| {
            let l = (x[b] - x[a]).norm() - 1.0;
            0.5 * stretch * l * l
        })
        .sum()
}

fn shear_sum(x: &[Vec3], shear: f64, topo: &Topology) -> (f64, usize) {
    let mut e = 0.0;
    let mut bad = 0;
    for &[i, k, j] in &topo.shear {
        match angle(&(x[i] - x[k]), &(x[j] - x[k])) {
            Some(phi) => e += 0.5 * shear * (phi - FRAC_PI_2).powi(2),
            None => bad += 1,
        }
    }
    (e, bad)
}

fn bend_sum(x: &[Vec3], bend: f64, topo: &Topology) -> (f64, usize) {
    let mut e = 0.0;
    let mut bad = 0;
    for &[i, k, l] in &topo.bend {
        match angle(&(x[k] - x[i]), &(x[l] - x[k])) {
            Some(theta) => e += 0.5 * bend * theta * theta,
            None => bad += 1,
        }
    }
    (e, bad)
}

/// `Σ ½ S (φ - π/2)²` over shear corners. Corners with a zero-length edge contribute 0.
pub fn shear_energy(x: &[Vec3], shear: f64, topo: &Topology) -> f64 {
    shear_sum(x, shear, topo).0
}

/// `Σ ½ B θ²` over bend triples. Triples with a zero-length edge contribute 0.
pub fn bend_energy(x: &[Vec3], bend: f64, topo: &Topology) -> f64 {
    bend_sum(x, bend, topo).0
}

pub fn energy_breakdown(x: &[Vec3], params: &ClothParams, topo: &Topology) -> EnergyBreakdown {
    let (shear, d1) = shear_sum(x, params.shear, topo);
    let (bend, d2) = bend_sum(x, params.bend, topo);
    EnergyBreakdown { stretch: stretch_energy(x, params.stretch, topo), shear, bend, degenerate: d1 + d2 }
}

pub fn internal_energy(x: &[Vec3], params: &ClothParams, topo: &Topology) -> f64 {
    energy_breakdown(x, params, topo).total()
}

/// Adds `∂E_int/∂x` into `out`.
pub fn add_energy_gradient(x: &[Vec3], params: &ClothParams, topo: &Topology, out: &mut [Vec3]) {
    let add = |out: &mut [Vec3], idx: usize, g: V3<f64>| {
        out[idx] += Vec3::new(g.0, g.1, g.2);
    };
    if params.stretch != 0.0 {
        for &[a, b] in &topo.stretch {
            let [ga, gb] = stretch_grad(v3::<f64>(&x[a]), v3(&x[b]), params.stretch);
            add(out, a, ga);
            add(out, b, gb);
        }
    }
    if params.shear != 0.0 {
        for &[i, k, j] in &topo.shear {
            if let Some(g) = shear_grad(v3::<f64>(&x[i]), v3(&x[k]), v3(&x[j]), params.shear) {
                add(out, i, g[0]);
                add(out, k, g[1]);
                add(out, j, g[2]);
            }
        }
    }
    if params.bend != 0.0 {
        for &[i, k, l] in &topo.bend {
            if let Some(g) = bend_grad(v3::<f64>(&x[i]), v3(&x[k]), v3(&x[l]), params.bend) {
                add(out, i, g[0]);
                add(out, k, g[1]);
                add(out, l, g[2]);
            }
        }
    }
}

/// `F_int = -∂E_int/∂x`.
pub fn internal_forces(x: &[Vec3], params: &ClothParams, topo: &Topology) -> Vec<Vec3> {
    let mut g = vec![Vec3::zeros(); x.len()];
    add_energy_gradient(x, params, topo, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    g
}

/// Forces of each term at unit stiffness, i.e. `∂F_int/∂(Y, S, B)`.
pub fn unit_forces(x: &[Vec3], topo: &Topology) -> [Vec<Vec3>; 3] {
    [
        internal_forces(x, &ClothParams::new(1.0, 0.0, 0.0), topo),
        internal_forces(x, &ClothParams::new(0.0, 1.0, 0.0), topo),
        internal_forces(x, &ClothParams::new(0.0, 0.0, 1.0), topo),
    ]
}

#[inline]
fn seeded1(p: &Vec3, dp: &Vec3) -> V3<Dual<1>> {
    V3(Dual::new(p.x, [dp.x]), Dual::new(p.y, [dp.y]), Dual::new(p.z, [dp.z]))
}

/// `(∂²E_int/∂x²) p`, exact up to rounding.
pub fn hessian_vec(x: &[Vec3], params: &ClothParams, topo: &Topology, p: &[Vec3]) -> Vec<Vec3> {
    assert_eq!(x.len(), p.len(), "direction must match the state shape");
    let mut out = vec![Vec3::zeros(); x.len()];
    let add = |out: &mut [Vec3], idx: usize, g: V3<Dual<1>>| {
        out[idx] += Vec3::new(g.0.d[0], g.1.d[0], g.2.d[0]);
    };
    for &[a, b] in &topo.stretch {
        let [ga, gb] = stretch_grad(seeded1(&x[a], &p[a]), seeded1(&x[b], &p[b]), params.stretch);
        add(&mut out, a, ga);
        add(&mut out, b, gb);
    }
    for &[i, k, j] in &topo.shear {
        if let Some(g) = shear_grad(seeded1(&x[i], &p[i]), seeded1(&x[k], &p[k]), seeded1(&x[j], &p[j]), params.shear) {
            add(&mut out, i, g[0]);
            add(&mut out, k, g[1]);
            add(&mut out, j, g[2]);
        }
    }
    for &[i, k, l] in &topo.bend {
        if let Some(g) = bend_grad(seeded1(&x[i], &p[i]), seeded1(&x[k], &p[k]), seeded1(&x[l], &p[l]), params.bend) {
            add(&mut out, i, g[0]);
            add(&mut out, k, g[1]);
            add(&mut out, l, g[2]);
        }
    }
    out
}

#[inline]
fn seeded<const N: usize>(p: &Vec3, slot0: usize) -> V3<Dual<N>> {
    V3(Dual::var(p.x, slot0), Dual::var(p.y, slot0 + 1), Dual::var(p.z, slot0 + 2))
}

/// Element Hessian blocks: `(row vertex, col vertex, 3x3)`.
type Blocks = Vec<(usize, usize, Matrix3<f64>)>;

fn push_blocks<const N: usize>(ids: &[usize], grads: &[V3<Dual<N>>], out: &mut Blocks) {
    for (ra, g) in ids.iter().zip(grads) {
        for (cb, &col) in ids.iter().enumerate() {
            let rows = [g.0.d, g.1.d, g.2.d];
            let m = Matrix3::from_fn(|r, c| rows[r][3 * cb + c]);
            out.push((*ra, col, m));
        }
    }
}

fn element_blocks(x: &[Vec3], params: &ClothParams, topo: &Topology, kind: usize, e: usize) -> Blocks {
    let mut out = Vec::new();
    match kind {
        0 => {
            let [a, b] = topo.stretch[e];
            let g = stretch_grad::<Dual<6>>(seeded(&x[a], 0), seeded(&x[b], 3), params.stretch);
            push_blocks(&[a, b], &g, &mut out);
        }
        1 => {
            let [i, k, j] = topo.shear[e];
            if let Some(g) = shear_grad::<Dual<9>>(seeded(&x[i], 0), seeded(&x[k], 3), seeded(&x[j], 6), params.shear) {
                push_blocks(&[i, k, j], &g, &mut out);
            }
        }
        _ => {
            let [i, k, l] = topo.bend[e];
            if let Some(g) = bend_grad::<Dual<9>>(seeded(&x[i], 0), seeded(&x[k], 3), seeded(&x[l], 6), params.bend) {
                push_blocks(&[i, k, l], &g, &mut out);
            }
        }
    }
    out
}

/// Assembles `∂²E_int/∂x²` into the grid block matrix.
pub fn assemble_hessian(x: &[Vec3], params: &ClothParams, topo: &Topology) -> BlockMatrix {
    const CHUNK: usize = 256;
    let mut jobs = Vec::new();
    for (kind, (count, k)) in [
        (topo.stretch.len(), params.stretch),
        (topo.shear.len(), params.shear),
        (topo.bend.len(), params.bend),
    ]
    .into_iter()
    .enumerate()
    {
        if k == 0.0 {
            continue;
        }
        for start in (0..count).step_by(CHUNK) {
            jobs.push((kind, start, (start + CHUNK).min(count)));
        }
    }
    let parts = par::map(&jobs, |&(kind, s, e)| {
        let mut b = Vec::new();
        for el in s..e {
            b.extend(element_blocks(x, params, topo, kind, el));
        }
        b
    });
    let mut h = BlockMatrix::zeros(topo.rows, topo.cols);
    for part in parts {
        for (r, c, m) in part {
            h.add_block(r, c, &m);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jitter(n: usize, rows: usize, cols: usize, amp: f64, seed: u64) -> Vec<Vec3> {
        let model = crate::cloth::ClothModel::new(rows, cols).unwrap();
        assert_eq!(model.len(), n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model
            .rest_positions()
            .into_iter()
            .map(|p| p + Vec3::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)))
            .collect()
    }

    #[test]
    fn topology_counts_match_enumeration() {
        for r in 2..7 {
            for c in 2..7 {
                let t = Topology::grid(r, c);
                assert_eq!(t.stretch.len(), r * (c - 1) + c * (r - 1));
                assert_eq!(t.shear.len(), 4 * (r - 1) * (c - 1));
                assert_eq!(t.bend.len(), r * (c - 2) + c * (r - 2));
            }
        }
    }

    #[test]
    fn shear_corners_pair_warp_with_weft() {
        let t = Topology::grid(4, 5);
        for &[i, k, j] in &t.shear {
            let d = |a: usize, b: usize| (a as i64 - b as i64).abs();
            let mut ds = [d(i, k), d(j, k)];
            ds.sort();
            assert_eq!(ds, [1, 5]);
        }
    }

    #[test]
    fn rest_pose_has_zero_energy_and_force() {
        let model = crate::cloth::ClothModel::new(6, 5).unwrap();
        let x = model.rest_positions();
        let p = ClothParams::new(3000.0, 8.0, 0.5);
        let b = energy_breakdown(&x, &p, &model.topology);
        assert_eq!(b.total(), 0.0);
        assert_eq!(b.degenerate, 0);
        let f = internal_forces(&x, &p, &model.topology);
        assert!(f.iter().all(|v| v.norm() < 1e-12));
    }

    fn single_edge() -> Topology {
        Topology { rows: 1, cols: 2, stretch: vec![[0, 1]], shear: vec![], bend: vec![] }
    }

    #[test]
    fn single_edge_stretch() {
        let x = vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)];
        let t = single_edge();
        assert!((stretch_energy(&x, 1.0, &t) - 0.5).abs() < 1e-15);
        assert!((stretch_energy(&x, 2.0, &t) - 1.0).abs() < 1e-15);
        let f = internal_forces(&x, &ClothParams::new(1.0, 0.0, 0.0), &t);
        assert!((f[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((f[1] - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn shear_corner_at_sixty_degrees() {
        let t = Topology { rows: 1, cols: 3, stretch: vec![], shear: vec![[0, 1, 2]], bend: vec![] };
        let a = std::f64::consts::FRAC_PI_3;
        let x = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), Vec3::new(a.cos(), a.sin(), 0.0)];
        let e = shear_energy(&x, 2.0, &t);
        let expect = 0.5 * 2.0 * (a - FRAC_PI_2).powi(2);
        assert!((e - expect).abs() < 1e-14);
        assert!((e - 0.274_155_677_808_037_8).abs() < 1e-12);
    }

    #[test]
    fn bend_fold_ninety_degrees() {
        let t = Topology { rows: 1, cols: 3, stretch: vec![], shear: vec![], bend: vec![[0, 1, 2]] };
        let x = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0)];
        let e = bend_energy(&x, 1.0, &t);
        assert!((e - 0.5 * FRAC_PI_2 * FRAC_PI_2).abs() < 1e-14);
        assert!((e - 1.233_700_550_136_169_7).abs() < 1e-12);
    }

    #[test]
    fn degenerate_angle_contributes_nothing() {
        let t = Topology { rows: 1, cols: 3, stretch: vec![], shear: vec![[0, 1, 2]], bend: vec![[0, 1, 2]] };
        let x = vec![Vec3::zeros(), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)];
        let b = energy_breakdown(&x, &ClothParams::new(0.0, 1.0, 1.0), &t);
        assert_eq!(b.shear, 0.0);
        assert_eq!(b.bend, 0.0);
        assert_eq!(b.degenerate, 2);
        let f = internal_forces(&x, &ClothParams::new(0.0, 1.0, 1.0), &t);
        assert!(f.iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn reflection_keeps_shear_energy() {
        let model = crate::cloth::ClothModel::new(5, 5).unwrap();
        let x = jitter(25, 5, 5, 0.3, 11);
        let mirrored: Vec<Vec3> = x.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let a = shear_energy(&x, 3.0, &model.topology);
        let b = shear_energy(&mirrored, 3.0, &model.topology);
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn forces_match_central_differences() {
        let model = crate::cloth::ClothModel::new(5, 4).unwrap();
        let p = ClothParams::new(37.0, 2.5, 0.8);
        let x = jitter(20, 5, 4, 0.25, 5);
        let f = internal_forces(&x, &p, &model.topology);
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        let scale = f.iter().map(|v| v.amax()).fold(0.0, f64::max);
        for k in 0..x.len() {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k][c] += h;
                xm[k][c] -= h;
                let fd = -(internal_energy(&xp, &p, &model.topology) - internal_energy(&xm, &p, &model.topology)) / (2.0 * h);
                max_err = max_err.max((fd - f[k][c]).abs() / scale);
            }
        }
        assert!(max_err < 1e-6, "relative force error {max_err}");
    }

    #[test]
    fn hessian_vec_matches_force_differences() {
        let model = crate::cloth::ClothModel::new(4, 4).unwrap();
        let p = ClothParams::new(120.0, 3.0, 0.4);
        let x = jitter(16, 4, 4, 0.2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir: Vec<Vec3> = (0..16).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let hv = hessian_vec(&x, &p, &model.topology, &dir);
        let xmax = x.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let h = 1e-6 * (1.0 + xmax);
        let shifted = |s: f64| -> Vec<Vec3> {
            let xs: Vec<Vec3> = x.iter().zip(&dir).map(|(a, d)| a + d * s).collect();
            internal_forces(&xs, &p, &model.topology)
        };
        let (fp, fm) = (shifted(h), shifted(-h));
        let fd: Vec<Vec3> = fp.iter().zip(&fm).map(|(a, b)| -(a - b) / (2.0 * h)).collect();
        let num: f64 = hv.iter().zip(&fd).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        assert!(num / den < 1e-4, "hvp rel err {}", num / den);
    }

    #[test]
    fn assembled_hessian_agrees_with_matrix_free() {
        let model = crate::cloth::ClothModel::new(5, 6).unwrap();
        let p = ClothParams::new(500.0, 5.0, 0.7);
        let x = jitter(30, 5, 6, 0.3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let hv = hessian_vec(&x, &p, &model.topology, &dir);
        let h = assemble_hessian(&x, &p, &model.topology);
        let mut out = vec![Vec3::zeros(); 30];
        h.mul(&dir, &mut out);
        for (a, b) in hv.iter().zip(&out) {
            assert!((a - b).norm() < 1e-9 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn flat_pose_bending_hessian_is_finite_and_positive() {
        let model = crate::cloth::ClothModel::new(3, 3).unwrap();
        let x = model.rest_positions();
        let p = ClothParams::new(0.0, 0.0, 1.0);
        let mut dir = vec![Vec3::zeros(); 9];
        dir[4] = Vec3::new(0.0, 0.0, 1.0);
        let hv = hessian_vec(&x, &p, &model.topology, &dir);
        assert!(hv.iter().all(|v| v.iter().all(|c| c.is_finite())));
        // pushing the centre out of plane must be resisted
        assert!(hv[4].z > 0.0);
        // compare to the curvature of the energy along that direction
        let e = |s: f64| {
            let mut y = x.clone();
            y[4].z += s;
            internal_energy(&y, &p, &model.topology)
        };
        let h = 1e-4;
        let curv = (e(h) - 2.0 * e(0.0) + e(-h)) / (h * h);
        assert!((hv[4].z - curv).abs() < 1e-5 * curv);
    }
}
