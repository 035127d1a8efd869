//! Block-sparse matrices over the cloth grid with conjugate gradient and MINRES solvers.
//!
//! Every coupling produced by the energy model lies within a fixed 13-point stencil around a
//! vertex (direct neighbours, diagonals and distance-2 along rows and columns), so the matrix is
//! stored as 13 3x3 blocks per vertex.

use nalgebra::Matrix3;

use crate::cloth::Vec3;
use crate::par;

pub const STENCIL: [(i32, i32); 13] = [
    (0, 0),
    (0, 1),
    (0, -1),
    (1, 0),
    (-1, 0),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
    (0, 2),
    (0, -2),
    (2, 0),
    (-2, 0),
];

#[inline]
fn slot(di: i32, dj: i32) -> usize {
    STENCIL
        .iter()
        .position(|&s| s == (di, dj))
        .unwrap_or_else(|| panic!("coupling ({di}, {dj}) outside the grid stencil"))
}

#[derive(Clone, Debug)]
pub struct BlockMatrix {
    pub rows: usize,
    pub cols: usize,
    blocks: Vec<[Matrix3<f64>; 13]>,
}

impl BlockMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, blocks: vec![[Matrix3::zeros(); 13]; rows * cols] }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    #[inline]
    fn neighbour(&self, v: usize, s: usize) -> Option<usize> {
        let (i, j) = ((v / self.cols) as i32, (v % self.cols) as i32);
        let (di, dj) = STENCIL[s];
        let (ni, nj) = (i + di, j + dj);
        if ni < 0 || nj < 0 || ni >= self.rows as i32 || nj >= self.cols as i32 {
            None
        } else {
            Some(ni as usize * self.cols + nj as usize)
        }
    }

    /// `A[row, col] += m`.
    pub fn add_block(&mut self, row: usize, col: usize, m: &Matrix3<f64>) {
        let (ri, rj) = ((row / self.cols) as i32, (row % self.cols) as i32);
        let (ci, cj) = ((col / self.cols) as i32, (col % self.cols) as i32);
        self.blocks[row][slot(ci - ri, cj - rj)] += m;
    }

    /// Adds `d[v] * I` to every diagonal block.
    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (b, &m) in self.blocks.iter_mut().zip(d) {
            b[0] += Matrix3::identity() * m;
        }
    }

    pub fn diagonal_block(&self, v: usize) -> &Matrix3<f64> {
        &self.blocks[v][0]
    }

    pub fn block(&self, row: usize, col: usize) -> Matrix3<f64> {
        let (ri, rj) = ((row / self.cols) as i32, (row % self.cols) as i32);
        let (ci, cj) = ((col / self.cols) as i32, (col % self.cols) as i32);
        let (di, dj) = (ci - ri, cj - rj);
        match STENCIL.iter().position(|&s| s == (di, dj)) {
            Some(s) => self.blocks[row][s],
            None => Matrix3::zeros(),
        }
    }

    /// `out = A x`.
    pub fn mul(&self, x: &[Vec3], out: &mut [Vec3]) {
        let cols = self.cols;
        par::for_each_chunk_mut(out, cols, |row, chunk| {
            for (jj, o) in chunk.iter_mut().enumerate() {
                let v = row * cols + jj;
                let mut acc = Vec3::zeros();
                for s in 0..13 {
                    if let Some(n) = self.neighbour(v, s) {
                        acc += self.blocks[v][s] * x[n];
                    }
                }
                *o = acc;
            }
        });
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    /// Relative residual target `|r| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub rel_residual: f64,
    /// Stopped at a direction of non-positive curvature.
    pub negative_curvature: bool,
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Block-Jacobi preconditioner; falls back to a scalar scale where a block is not positive definite.
fn preconditioner(a: &BlockMatrix) -> Vec<Matrix3<f64>> {
    (0..a.len())
        .map(|v| {
            let d = a.diagonal_block(v);
            let sym = (d + d.transpose()) * 0.5;
            match sym.cholesky() {
                Some(c) => c.inverse(),
                None => {
                    let s = d.diagonal().abs().max().max(1e-12);
                    Matrix3::identity() / s
                }
            }
        })
        .collect()
}

/// Solves `A x = b` restricted to vertices with `free[v]`; other rows of `x` are left at zero.
///
/// `x` is used as the starting guess. If a direction of non-positive curvature shows up the
/// iteration stops; on the first iteration the preconditioned right-hand side is returned, which
/// is still a descent direction for Newton's method.
pub fn pcg(a: &BlockMatrix, free: &[bool], b: &[Vec3], x: &mut [Vec3], opts: CgOptions) -> CgOutcome {
    let n = b.len();
    let pre = preconditioner(a);
    let mask = |v: &mut [Vec3]| {
        for (e, &f) in v.iter_mut().zip(free) {
            if !f {
                *e = Vec3::zeros();
            }
        }
    };
    mask(x);
    let mut ax = vec![Vec3::zeros(); n];
    a.mul(x, &mut ax);
    let mut r: Vec<Vec3> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    mask(&mut r);
    let mut bm = b.to_vec();
    mask(&mut bm);
    let bnorm = dot(&bm, &bm).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = Vec3::zeros());
        return CgOutcome { iterations: 0, rel_residual: 0.0, negative_curvature: false };
    }
    let apply_pre = |r: &[Vec3]| -> Vec<Vec3> { r.iter().zip(&pre).map(|(r, m)| m * r).collect() };
    let mut z = apply_pre(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![Vec3::zeros(); n];
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while it < opts.max_iter && rel > opts.tol {
        a.mul(&p, &mut ap);
        mask(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            if it == 0 {
                let zb = apply_pre(&bm);
                x.copy_from_slice(&zb);
                mask(x);
            }
            return CgOutcome { iterations: it, rel_residual: rel, negative_curvature: true };
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += p[k] * alpha;
            r[k] -= ap[k] * alpha;
        }
        z = apply_pre(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + p[k] * beta;
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        it += 1;
    }
    CgOutcome { iterations: it, rel_residual: rel, negative_curvature: false }
}

/// Preconditioned MINRES for symmetric, possibly indefinite `A`, restricted to `free` vertices.
///
/// `x` is the starting guess. The reported residual is the true `|b - A x| / |b|`.
pub fn minres(a: &BlockMatrix, free: &[bool], b: &[Vec3], x: &mut [Vec3], opts: CgOptions) -> CgOutcome {
    let n = b.len();
    let pre = preconditioner(a);
    let mask = |v: &mut [Vec3]| {
        for (e, &f) in v.iter_mut().zip(free) {
            if !f {
                *e = Vec3::zeros();
            }
        }
    };
    let apply = |v: &[Vec3], out: &mut Vec<Vec3>| {
        a.mul(v, out);
        mask(out);
    };
    let apply_pre = |r: &[Vec3]| -> Vec<Vec3> { r.iter().zip(&pre).map(|(r, m)| m * r).collect() };
    mask(x);
    let mut bm = b.to_vec();
    mask(&mut bm);
    let bnorm = dot(&bm, &bm).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = Vec3::zeros());
        return CgOutcome { iterations: 0, rel_residual: 0.0, negative_curvature: false };
    }
    let true_residual = |x: &[Vec3]| {
        let mut ax = vec![Vec3::zeros(); n];
        apply(x, &mut ax);
        let r: Vec<Vec3> = bm.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
        dot(&r, &r).sqrt() / bnorm
    };

    let mut ax = vec![Vec3::zeros(); n];
    apply(x, &mut ax);
    let mut r1: Vec<Vec3> = bm.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    let mut y = apply_pre(&r1);
    let beta1 = dot(&r1, &y).max(0.0).sqrt();
    if beta1 == 0.0 {
        return CgOutcome { iterations: 0, rel_residual: true_residual(x), negative_curvature: false };
    }
    let mut r2 = r1.clone();
    let (mut oldb, mut beta, mut dbar, mut epsln, mut phibar) = (0.0, beta1, 0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![Vec3::zeros(); n];
    let mut w2 = vec![Vec3::zeros(); n];
    let mut av = vec![Vec3::zeros(); n];
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let v: Vec<Vec3> = y.iter().map(|e| e / beta).collect();
        apply(&v, &mut av);
        if it >= 2 {
            for k in 0..n {
                av[k] -= r1[k] * (beta / oldb);
            }
        }
        let alfa = dot(&v, &av);
        for k in 0..n {
            av[k] -= r2[k] * (alfa / beta);
        }
        r1 = std::mem::replace(&mut r2, av.clone());
        y = apply_pre(&r2);
        oldb = beta;
        beta = dot(&r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w.clone());
        for k in 0..n {
            w[k] = (v[k] - w1[k] * oldeps - w2[k] * delta) / gamma;
            x[k] += w[k] * phi;
        }
        if phibar / beta1 <= 0.1 * opts.tol || beta == 0.0 {
            break;
        }
        if phibar / beta1 <= opts.tol && true_residual(x) <= opts.tol {
            break;
        }
    }
    CgOutcome { iterations: it, rel_residual: true_residual(x), negative_curvature: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(rows: usize, cols: usize, shift: f64) -> BlockMatrix {
        let mut a = BlockMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = i * cols + j;
                for (di, dj) in [(0i32, 1i32), (1, 0)] {
                    let (ni, nj) = (i as i32 + di, j as i32 + dj);
                    if ni < rows as i32 && nj < cols as i32 {
                        let n = ni as usize * cols + nj as usize;
                        let id = Matrix3::identity();
                        a.add_block(v, v, &id);
                        a.add_block(n, n, &id);
                        a.add_block(v, n, &(-id));
                        a.add_block(n, v, &(-id));
                    }
                }
            }
        }
        a.add_diagonal(&vec![shift; rows * cols]);
        a
    }

    #[test]
    fn solves_shifted_laplacian() {
        let a = laplacian(6, 7, 0.1);
        let n = 42;
        let truth: Vec<Vec3> = (0..n).map(|k| Vec3::new(k as f64, (k * k % 7) as f64, 1.0)).collect();
        let mut b = vec![Vec3::zeros(); n];
        a.mul(&truth, &mut b);
        let mut x = vec![Vec3::zeros(); n];
        let out = pcg(&a, &vec![true; n], &b, &mut x, CgOptions { tol: 1e-12, max_iter: 500 });
        assert!(out.rel_residual <= 1e-12);
        for (a, b) in x.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn masked_rows_stay_zero() {
        let a = laplacian(4, 4, 1.0);
        let b = vec![Vec3::new(1.0, 2.0, 3.0); 16];
        let mut free = vec![true; 16];
        free[0] = false;
        free[3] = false;
        let mut x = vec![Vec3::zeros(); 16];
        pcg(&a, &free, &b, &mut x, CgOptions::default());
        assert_eq!(x[0], Vec3::zeros());
        assert_eq!(x[3], Vec3::zeros());
        // free rows satisfy their equations
        let mut ax = vec![Vec3::zeros(); 16];
        a.mul(&x, &mut ax);
        for v in (0..16).filter(|&v| free[v]) {
            assert!((ax[v] - b[v]).norm() < 1e-6);
        }
    }

    #[test]
    fn negative_curvature_is_reported() {
        let mut a = BlockMatrix::zeros(2, 2);
        a.add_diagonal(&[-1.0; 4]);
        let b = vec![Vec3::new(1.0, 0.0, 0.0); 4];
        let mut x = vec![Vec3::zeros(); 4];
        let out = pcg(&a, &[true; 4], &b, &mut x, CgOptions::default());
        assert!(out.negative_curvature);
        assert!(dot(&x, &b) > 0.0);
    }

    #[test]
    fn minres_solves_indefinite_system() {
        // eigenvalues of the Laplacian span [0, 8], so a shift of -1.3 makes it indefinite
        let a = laplacian(6, 7, -1.3);
        let n = 42;
        let truth: Vec<Vec3> = (0..n).map(|k| Vec3::new((k as f64).sin(), (k * k % 7) as f64, 1.0)).collect();
        let mut b = vec![Vec3::zeros(); n];
        a.mul(&truth, &mut b);
        let mut x = vec![Vec3::zeros(); n];
        assert!(pcg(&a, &vec![true; n], &b, &mut x.clone(), CgOptions { tol: 1e-12, max_iter: 500 }).negative_curvature);
        let out = minres(&a, &vec![true; n], &b, &mut x, CgOptions { tol: 1e-12, max_iter: 2000 });
        assert!(out.rel_residual <= 1e-11, "{out:?}");
        for (a, b) in x.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-7);
        }
    }

    #[test]
    fn minres_respects_mask() {
        let a = laplacian(4, 4, 0.5);
        let b = vec![Vec3::new(1.0, -2.0, 3.0); 16];
        let mut free = vec![true; 16];
        free[5] = false;
        let mut x = vec![Vec3::zeros(); 16];
        let out = minres(&a, &free, &b, &mut x, CgOptions { tol: 1e-10, max_iter: 500 });
        assert!(out.rel_residual <= 1e-10);
        assert_eq!(x[5], Vec3::zeros());
    }
}
