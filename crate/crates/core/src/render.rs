//! Differentiable rasterisation of the cloth mesh.
//!
//! Colour is a textured, depth-tested rasterisation with perspective-correct barycentrics and
//! bilinear texture lookup. Its gradients flow through the barycentrics and the uv-coordinates
//! only: which triangle covers a pixel is treated as fixed. The mask is soft, a logistic of the
//! signed screen distance to the nearest silhouette edge, so boundary motion is carried by the
//! mask alone.
//!
//! Pixel `(x, y)` has its centre at `(x + 0.5, y + 0.5)`; `y` grows downwards.

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::cloth::{Units, Vec3};
use crate::par;
use crate::{Error, Result};

/// Vertices closer to the camera plane than this are not rasterised.
pub const NEAR: f64 = 1e-4;

/// Row-major image with interleaved channels, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let data = (0..width * height).flat_map(|_| value.iter().copied()).collect();
        Self { width, height, channels: value.len(), data }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }
}

/// Pinhole camera; `rotation` and `translation` map world points into camera space
/// (`+z` forward, `+y` down).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(orth < 1e-9) || !(rotation.determinant() > 0.0) {
            return Err(Error::invalid("camera rotation must be a proper rotation"));
        }
        Ok(Self { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("eye and target coincide"))?;
        let right = f.cross(&up).try_normalize(1e-12).ok_or_else(|| Error::invalid("up is parallel to the view direction"))?;
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let focal = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::new(focal, focal, 0.5 * width as f64, 0.5 * height as f64, width, height, rotation, -(rotation * eye))
    }

    /// The same camera for positions expressed in normalised units.
    pub fn normalized(&self, units: &Units) -> Self {
        Self { translation: self.translation / units.space_scale, ..self.clone() }
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn project(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    /// Rows are `∂s_x/∂P` and `∂s_y/∂P` for camera-space `P`.
    fn project_jacobian(&self, pc: &Vec3) -> [Vec3; 2] {
        let iz = 1.0 / pc.z;
        [
            Vec3::new(self.fx * iz, 0.0, -self.fx * pc.x * iz * iz),
            Vec3::new(0.0, self.fy * iz, -self.fy * pc.y * iz * iz),
        ]
    }

    fn ray(&self, x: usize, y: usize) -> Vec3 {
        Vec3::new((x as f64 + 0.5 - self.cx) / self.fx, (y as f64 + 0.5 - self.cy) / self.fy, 1.0)
    }
}

/// RGB texture sampled bilinearly with clamped addressing; `u` runs along columns, `v` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    image: Image,
}

impl Texture {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels != 3 || image.pixels() == 0 {
            return Err(Error::invalid("texture must be a nonempty RGB image"));
        }
        Ok(Self { image })
    }

    pub fn constant(rgb: [f64; 3]) -> Self {
        Self { image: Image::filled(1, 1, &rgb) }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    /// Colour at `(u, v)` with its derivatives along `u` and `v`.
    pub fn sample(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (w, h) = (self.image.width, self.image.height);
        let fx = u * w as f64 - 0.5;
        let fy = v * h as f64 - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let (tx, ty) = (fx - x0, fy - y0);
        let cl = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
        let (xa, xb) = (cl(x0, w), cl(x0 + 1.0, w));
        let (ya, yb) = (cl(y0, h), cl(y0 + 1.0, h));
        let mut c = [0.0; 3];
        let mut du = [0.0; 3];
        let mut dv = [0.0; 3];
        for k in 0..3 {
            let c00 = self.image.get(xa, ya, k);
            let c10 = self.image.get(xb, ya, k);
            let c01 = self.image.get(xa, yb, k);
            let c11 = self.image.get(xb, yb, k);
            let top = c00 + tx * (c10 - c00);
            let bot = c01 + tx * (c11 - c01);
            c[k] = top + ty * (bot - top);
            du[k] = w as f64 * ((c10 - c00) * (1.0 - ty) + (c11 - c01) * ty);
            dv[k] = h as f64 * (bot - top);
        }
        (c, du, dv)
    }
}

/// Per-vertex texture coordinates.
pub type UvMap = Vec<[f64; 2]>;

/// The template parameterisation: `u = j / (C - 1)`, `v = i / (R - 1)`.
pub fn grid_uv(rows: usize, cols: usize) -> UvMap {
    let mut uv = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            uv.push([j as f64 / (cols - 1) as f64, i as f64 / (rows - 1) as f64]);
        }
    }
    uv
}

/// Two triangles per grid quad.
pub fn triangulate(rows: usize, cols: usize) -> Vec<[usize; 3]> {
    let id = |i: usize, j: usize| i * cols + j;
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            faces.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
            faces.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    faces
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Edge {
    v: [usize; 2],
    faces: [usize; 2],
    boundary: bool,
}

fn edges_of(faces: &[[usize; 3]]) -> Vec<Edge> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (f, t) in faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            map.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    map.into_iter()
        .map(|((a, b), fs)| Edge { v: [a, b], faces: [fs[0], *fs.get(1).unwrap_or(&fs[0])], boundary: fs.len() == 1 })
        .collect()
}

/// The covering triangle at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub face: u32,
    pub bary: [f64; 3],
    pub depth: f64,
}

/// Nearest silhouette edge of a pixel inside the soft band.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SoftSample {
    edge: [u32; 2],
    lambda: f64,
    dist: f64,
    /// Closest point on the edge minus the pixel centre, normalised.
    dir: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub mask: Image,
    pub fragments: Vec<Option<Fragment>>,
    soft: Vec<Option<SoftSample>>,
    cam: Vec<Vec3>,
    screen: Vec<[f64; 2]>,
}

impl RenderOutput {
    /// Hard coverage as a 0/1 mask.
    pub fn coverage(&self) -> Image {
        let mut m = Image::zeros(self.mask.width, self.mask.height, 1);
        for (d, f) in m.data.iter_mut().zip(&self.fragments) {
            *d = if f.is_some() { 1.0 } else { 0.0 };
        }
        m
    }
}

/// Gradients of a scalar loss through [`Renderer::render`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub positions: Vec<Vec3>,
    pub uv: Vec<[f64; 2]>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Rasteriser for one mesh topology, camera and texture.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub faces: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    pub camera: Camera,
    pub texture: Texture,
    /// Width of the soft silhouette in pixels.
    pub tau: f64,
    /// Pixels farther than `band * tau` from the silhouette get a hard 0/1 mask.
    pub band: f64,
}

const ROW_CHUNK: usize = 8;

impl Renderer {
    pub fn new(faces: Vec<[usize; 3]>, camera: Camera, texture: Texture) -> Self {
        let edges = edges_of(&faces);
        Self { faces, edges, camera, texture, tau: 1.0, band: 10.0 }
    }

    pub fn for_grid(rows: usize, cols: usize, camera: Camera, texture: Texture) -> Self {
        Self::new(triangulate(rows, cols), camera, texture)
    }

    fn face_ok(&self, cam: &[Vec3], f: &[usize; 3]) -> bool {
        f.iter().all(|&k| cam[k].z > NEAR)
    }

    fn signed_area(screen: &[[f64; 2]], f: &[usize; 3]) -> f64 {
        let [a, b, c] = [screen[f[0]], screen[f[1]], screen[f[2]]];
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }

    pub fn render(&self, positions: &[Vec3], uv: &[[f64; 2]]) -> RenderOutput {
        let (w, h) = (self.camera.width, self.camera.height);
        let cam: Vec<Vec3> = positions.iter().map(|p| self.camera.to_camera(p)).collect();
        let screen: Vec<[f64; 2]> = cam.iter().map(|p| self.camera.project(p)).collect();
        let live: Vec<bool> = self.faces.iter().map(|f| self.face_ok(&cam, f)).collect();
        if !live.iter().any(|&l| l) && !self.faces.is_empty() {
            log::warn!("no triangle in front of the camera");
        }
        let bbox: Vec<[f64; 4]> = self
            .faces
            .iter()
            .map(|f| {
                let xs = f.map(|k| screen[k][0]);
                let ys = f.map(|k| screen[k][1]);
                [xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max), ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)]
            })
            .collect();

        let mut fragments: Vec<Option<Fragment>> = vec![None; w * h];
        par::for_each_chunk_mut(&mut fragments, ROW_CHUNK * w, |ci, chunk| {
            let y0 = ci * ROW_CHUNK;
            let y1 = y0 + chunk.len() / w;
            for (fi, f) in self.faces.iter().enumerate() {
                if !live[fi] {
                    continue;
                }
                let [bx0, bx1, by0, by1] = bbox[fi];
                let ylo = (by0 - 0.5).ceil().max(y0 as f64) as usize;
                let yhi = ((by1 - 0.5).floor() + 1.0).clamp(0.0, y1 as f64) as usize;
                let xlo = (bx0 - 0.5).ceil().max(0.0) as usize;
                let xhi = ((bx1 - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
                let [p0, p1, p2] = f.map(|k| cam[k]);
                let (c12, c20, c01) = (p1.cross(&p2), p2.cross(&p0), p0.cross(&p1));
                let det = p0.dot(&c12);
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        let r = self.camera.ray(x, y);
                        let wv = [c12.dot(&r), c20.dot(&r), c01.dot(&r)];
                        let wsum = wv[0] + wv[1] + wv[2];
                        if wsum == 0.0 || wv.iter().any(|&wi| wi * wsum < 0.0) {
                            continue;
                        }
                        let depth = det / wsum;
                        if depth <= NEAR {
                            continue;
                        }
                        let slot = &mut chunk[(y - y0) * w + x];
                        if slot.is_none_or(|s| depth < s.depth) {
                            *slot = Some(Fragment { face: fi as u32, bary: wv.map(|wi| wi / wsum), depth });
                        }
                    }
                }
            }
        });

        let mut rgb = Image::zeros(w, h, 3);
        for (p, frag) in fragments.iter().enumerate() {
            if let Some(fr) = frag {
                let f = self.faces[fr.face as usize];
                let (u, v) = interp_uv(uv, &f, &fr.bary);
                let (c, _, _) = self.texture.sample(u, v);
                rgb.data[3 * p..3 * p + 3].copy_from_slice(&c);
            }
        }

        let silhouette = self.silhouette_edges(&cam, &screen, &live, &fragments);
        let reach = self.band * self.tau;
        let mut soft: Vec<Option<SoftSample>> = vec![None; w * h];
        par::for_each_chunk_mut(&mut soft, ROW_CHUNK * w, |ci, chunk| {
            let y0 = ci * ROW_CHUNK;
            let y1 = y0 + chunk.len() / w;
            for e in &silhouette {
                let (a, b) = (screen[e[0]], screen[e[1]]);
                let ylo = (a[1].min(b[1]) - reach - 0.5).ceil().max(y0 as f64) as usize;
                let yhi = ((a[1].max(b[1]) + reach - 0.5).floor() + 1.0).clamp(0.0, y1 as f64) as usize;
                let xlo = (a[0].min(b[0]) - reach - 0.5).ceil().max(0.0) as usize;
                let xhi = ((a[0].max(b[0]) + reach - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
                let ab = [b[0] - a[0], b[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        let p = [x as f64 + 0.5, y as f64 + 0.5];
                        let lambda = if len2 > 0.0 { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                        let q = [a[0] + lambda * ab[0] - p[0], a[1] + lambda * ab[1] - p[1]];
                        let dist = q[0].hypot(q[1]);
                        if dist >= reach {
                            continue;
                        }
                        let slot = &mut chunk[(y - y0) * w + x];
                        if slot.is_none_or(|s| dist < s.dist) {
                            let dir = if dist > 0.0 { [q[0] / dist, q[1] / dist] } else { [0.0, 0.0] };
                            *slot = Some(SoftSample { edge: [e[0] as u32, e[1] as u32], lambda, dist, dir });
                        }
                    }
                }
            }
        });

        let mut mask = Image::zeros(w, h, 1);
        for p in 0..w * h {
            let inside = fragments[p].is_some();
            mask.data[p] = match &soft[p] {
                Some(s) => logistic(if inside { s.dist } else { -s.dist } / self.tau),
                None => {
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        RenderOutput { rgb, mask, fragments, soft, cam, screen }
    }

    /// Boundary edges and fold edges (adjacent faces with opposite screen orientation) that are
    /// not hidden behind other parts of the mesh.
    fn silhouette_edges(&self, cam: &[Vec3], screen: &[[f64; 2]], live: &[bool], frags: &[Option<Fragment>]) -> Vec<[usize; 2]> {
        let (w, h) = (self.camera.width, self.camera.height);
        self.edges
            .iter()
            .filter(|e| {
                let [f0, f1] = e.faces;
                if !live[f0] || !live[f1] {
                    return live[f0] || live[f1];
                }
                e.boundary || Self::signed_area(screen, &self.faces[f0]) * Self::signed_area(screen, &self.faces[f1]) < 0.0
            })
            .filter(|e| {
                let mid = (cam[e.v[0]] + cam[e.v[1]]) * 0.5;
                let s = self.camera.project(&mid);
                let (x, y) = (s[0].floor(), s[1].floor());
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return true;
                }
                match frags[y as usize * w + x as usize] {
                    Some(fr) => {
                        let fi = fr.face as usize;
                        fi == e.faces[0] || fi == e.faces[1] || fr.depth >= mid.z * (1.0 - 1e-3)
                    }
                    None => true,
                }
            })
            .map(|e| e.v)
            .collect()
    }

    /// Pulls image cotangents back to vertex positions and uv-coordinates.
    ///
    /// `d_rgb` must have the shape of `out.rgb` and `d_mask` that of `out.mask`.
    pub fn backward(&self, out: &RenderOutput, uv: &[[f64; 2]], d_rgb: Option<&Image>, d_mask: Option<&Image>) -> RenderGrad {
        let n = out.cam.len();
        let (w, h) = (self.camera.width, self.camera.height);
        let chunks = h.div_ceil(ROW_CHUNK);
        let partials = par::map_range(chunks, |ci| {
            let mut gp = vec![Vec3::zeros(); n];
            let mut guv = vec![[0.0; 2]; n];
            for y in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(h) {
                for x in 0..w {
                    let p = y * w + x;
                    if let (Some(d), Some(fr)) = (d_rgb, out.fragments[p]) {
                        let g = [d.data[3 * p], d.data[3 * p + 1], d.data[3 * p + 2]];
                        if g != [0.0; 3] {
                            self.backward_color(out, uv, x, y, &fr, g, &mut gp, &mut guv);
                        }
                    }
                    if let (Some(d), Some(s)) = (d_mask, out.soft[p]) {
                        let g = d.data[p];
                        if g != 0.0 && s.dist > 0.0 {
                            let sign = if out.fragments[p].is_some() { 1.0 } else { -1.0 };
                            let m = out.mask.data[p];
                            let dd = g * m * (1.0 - m) / self.tau * sign;
                            let [a, b] = s.edge.map(|k| k as usize);
                            let ds = [s.dir[0] * dd, s.dir[1] * dd];
                            for (k, wgt) in [(a, 1.0 - s.lambda), (b, s.lambda)] {
                                let j = self.camera.project_jacobian(&out.cam[k]);
                                gp[k] += (j[0] * ds[0] + j[1] * ds[1]) * wgt;
                            }
                        }
                    }
                }
            }
            (gp, guv)
        });
        let mut positions = vec![Vec3::zeros(); n];
        let mut guv = vec![[0.0; 2]; n];
        for (gp, gu) in partials {
            for k in 0..n {
                positions[k] += gp[k];
                guv[k][0] += gu[k][0];
                guv[k][1] += gu[k][1];
            }
        }
        let rt = self.camera.rotation.transpose();
        for g in positions.iter_mut() {
            *g = rt * *g;
        }
        RenderGrad { positions, uv: guv }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_color(&self, out: &RenderOutput, uv: &[[f64; 2]], x: usize, y: usize, fr: &Fragment, g: [f64; 3], gp: &mut [Vec3], guv: &mut [[f64; 2]]) {
        let f = self.faces[fr.face as usize];
        let (u, v) = interp_uv(uv, &f, &fr.bary);
        let (_, du, dv) = self.texture.sample(u, v);
        let gu: f64 = (0..3).map(|c| g[c] * du[c]).sum();
        let gv: f64 = (0..3).map(|c| g[c] * dv[c]).sum();
        let mut gb = [0.0; 3];
        for i in 0..3 {
            guv[f[i]][0] += fr.bary[i] * gu;
            guv[f[i]][1] += fr.bary[i] * gv;
            gb[i] = uv[f[i]][0] * gu + uv[f[i]][1] * gv;
        }
        // b_i = w_i / Σw with w_0 = (P1 × P2)·r and cyclic.
        let [p0, p1, p2] = f.map(|k| out.cam[k]);
        let r = self.camera.ray(x, y);
        let wsum = out.cam[f[0]].dot(&p1.cross(&p2)) / fr.depth;
        let gbb: f64 = (0..3).map(|i| gb[i] * fr.bary[i]).sum();
        let gw = gb.map(|b| (b - gbb) / wsum);
        gp[f[1]] += p2.cross(&r) * gw[0];
        gp[f[2]] += r.cross(&p1) * gw[0];
        gp[f[2]] += p0.cross(&r) * gw[1];
        gp[f[0]] += r.cross(&p2) * gw[1];
        gp[f[0]] += p1.cross(&r) * gw[2];
        gp[f[1]] += r.cross(&p0) * gw[2];
    }
}

fn interp_uv(uv: &[[f64; 2]], f: &[usize; 3], b: &[f64; 3]) -> (f64, f64) {
    let u = b[0] * uv[f[0]][0] + b[1] * uv[f[1]][0] + b[2] * uv[f[2]][0];
    let v = b[0] * uv[f[0]][1] + b[1] * uv[f[1]][1] + b[2] * uv[f[2]][1];
    (u, v)
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve(img: &Image, k: &[f64], horizontal: bool, transpose: bool) -> Image {
    let r = (k.len() / 2) as i64;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut out = Image::zeros(w, h, ch);
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    let idx = |line: usize, pos: usize, c: usize| if horizontal { (line * w + pos) * ch + c } else { (pos * w + line) * ch + c };
    for line in 0..lines {
        for pos in 0..len {
            for (t, &kv) in k.iter().enumerate() {
                let src = (pos as i64 + t as i64 - r).clamp(0, len as i64 - 1) as usize;
                for c in 0..ch {
                    if transpose {
                        out.data[idx(line, src, c)] += kv * img.data[idx(line, pos, c)];
                    } else {
                        out.data[idx(line, pos, c)] += kv * img.data[idx(line, src, c)];
                    }
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let k = gaussian_kernel(sigma);
    convolve(&convolve(img, &k, true, false), &k, false, false)
}

/// Adjoint of [`gaussian_blur`].
pub fn gaussian_blur_transpose(img: &Image, sigma: f64) -> Image {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let k = gaussian_kernel(sigma);
    convolve(&convolve(img, &k, false, true), &k, true, true)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over pixels of the L1 colour difference, with its gradient w.r.t. `rendered`.
pub fn image_loss(rendered: &Image, target: &Image) -> (f64, Image) {
    assert!(rendered.same_shape(target), "image shapes differ");
    let np = rendered.pixels() as f64;
    let mut grad = Image::zeros(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for (k, (a, b)) in rendered.data.iter().zip(&target.data).enumerate() {
        sum += (a - b).abs();
        grad.data[k] = sign(a - b) / np;
    }
    (sum / np, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteNorm {
    #[default]
    L1,
    L2,
}

/// Mean per-pixel difference of the blurred masks, with its gradient w.r.t. `rendered`.
pub fn silhouette_loss(rendered: &Image, target: &Image, sigma: f64, norm: SilhouetteNorm) -> (f64, Image) {
    assert!(rendered.same_shape(target), "mask shapes differ");
    let br = gaussian_blur(rendered, sigma);
    let bt = gaussian_blur(target, sigma);
    let np = rendered.pixels() as f64;
    let mut g = Image::zeros(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for (k, (a, b)) in br.data.iter().zip(&bt.data).enumerate() {
        let d = a - b;
        match norm {
            SilhouetteNorm::L1 => {
                sum += d.abs();
                g.data[k] = sign(d) / np;
            }
            SilhouetteNorm::L2 => {
                sum += d * d;
                g.data[k] = 2.0 * d / np;
            }
        }
    }
    (sum / np, gaussian_blur_transpose(&g, sigma))
}
