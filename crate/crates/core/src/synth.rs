//! Synthetic videos of a simulated cloth with known parameters.

use serde::{Deserialize, Serialize};

use crate::cloth::{ClothModel, ClothParams, ClothState, ForceField, Vec3};
use crate::eval::{chamfer, sample_surface};
use crate::integrator::{rollout, AnchorMode, SolverConfig, Trajectory};
use crate::par;
use crate::render::{grid_uv, triangulate, Camera, Image, Renderer, Texture, UvMap};
use crate::sft::Scene;
use crate::{Error, Result};

/// Horizontal gusts: a travelling wave along the grid rows, `amplitude * sin(ωt - k j + φ)`
/// along `direction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gust {
    pub direction: [f64; 3],
    pub amplitude: f64,
    /// Radians per frame.
    pub frequency: f64,
    /// Radians per grid column.
    pub wavenumber: f64,
}

/// Description of a synthetic scene, in normalised units (unit edges, unit steps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub params: [f64; 3],
    pub gravity: [f64; 3],
    /// Constant force per unit mass on top of gravity.
    pub wind: [f64; 3],
    pub gust: Option<Gust>,
    /// Amplitude of a smooth distortion of the true uv-map, in uv units.
    pub uv_distortion: f64,
    pub texture_size: usize,
    /// Initial rotation of the template about the line through the anchors, away from the camera.
    pub tilt_deg: f64,
    pub fov_deg: f64,
    pub seed: u64,
    pub anchor_mode: AnchorMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            n_frames: 30,
            width: 128,
            height: 128,
            params: [300.0, 8.0, 0.5],
            gravity: [0.0, -0.5, 0.0],
            wind: [0.0; 3],
            gust: None,
            uv_distortion: 0.0,
            texture_size: 256,
            tilt_deg: 40.0,
            fov_deg: 50.0,
            seed: 0,
            anchor_mode: AnchorMode::HardAnchors,
        }
    }
}

/// A scene together with the values it was generated from.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub scene: Scene,
    pub truth: Trajectory,
    pub params: ClothParams,
    pub forces: ForceField,
    pub uv: UvMap,
    pub texture: Texture,
}

/// Smooth colourful pattern with features at several scales.
pub fn pattern_texture(size: usize, seed: u64) -> Texture {
    let ph = (seed % 1000) as f64 * 0.731;
    let img = Image::from_fn(size, size, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        let c = c as f64;
        let a = (std::f64::consts::TAU * (3.0 * u + 1.3 * c) + ph).sin();
        let b = (std::f64::consts::TAU * (4.0 * v - 0.7 * c) + 2.0 * ph).cos();
        let d = (std::f64::consts::TAU * (5.0 * (u + v) + c)).sin();
        (0.5 + 0.25 * a * b + 0.2 * d).clamp(0.0, 1.0)
    });
    Texture::new(img).expect("RGB texture")
}

/// Camera in front of the template (`+z`), slightly above and to the side, framing the hanging
/// cloth.
pub fn default_camera(rows: usize, cols: usize, width: usize, height: usize, fov_deg: f64) -> Result<Camera> {
    let (w, h) = ((cols - 1) as f64, (rows - 1) as f64);
    let target = Vec3::new(0.5 * w, -0.5 * h, 0.0);
    let extent = 1.5 * w.max(h);
    let dist = 0.5 * extent / (0.5 * fov_deg.to_radians()).tan();
    let dir = Vec3::new(0.35, 0.3, 1.0).normalize();
    Camera::look_at(target + dir * dist, target, Vec3::y(), fov_deg, width, height)
}

/// Rest positions rotated by `deg` about the x axis (the line through the anchors); positive
/// angles move the free edge towards `-z`.
pub fn tilted_positions(model: &ClothModel, deg: f64) -> Vec<Vec3> {
    let (s, c) = deg.to_radians().sin_cos();
    model.rest_positions().into_iter().map(|p| Vec3::new(p.x, p.y * c, p.y * s)).collect()
}

/// The true uv-map: the grid parameterisation bent by a smooth field of size `amount`.
pub fn distorted_uv(rows: usize, cols: usize, amount: f64) -> UvMap {
    grid_uv(rows, cols)
        .into_iter()
        .map(|[u, v]| {
            let s = (std::f64::consts::PI * u).sin() * (std::f64::consts::PI * v).sin();
            [u + amount * s * (2.0 * v - 1.0), v + amount * s * (1.0 - 2.0 * u)]
        })
        .collect()
}

/// Per-frame-interval turbulence of a gust.
pub fn gust_turbulence(g: &Gust, rows: usize, cols: usize, intervals: usize) -> Vec<Vec<Vec3>> {
    let dir = Vec3::from(g.direction);
    (0..intervals)
        .map(|t| {
            (0..rows * cols)
                .map(|k| {
                    let (i, j) = (k / cols, k % cols);
                    let phase = g.frequency * t as f64 - g.wavenumber * j as f64 + 0.1 * i as f64;
                    dir * (g.amplitude * phase.sin())
                })
                .collect()
        })
        .collect()
}

/// Simulates, renders and packages a synthetic scene. Masks are the soft masks cut at 0.5.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    if spec.n_frames == 0 {
        return Err(Error::invalid("a scene needs at least one frame"));
    }
    let model = ClothModel::new(spec.rows, spec.cols)?;
    let params = ClothParams::from_array(spec.params);
    let gravity = Vec3::from(spec.gravity);
    let intervals = spec.n_frames - 1;
    let turbulence = spec.gust.as_ref().map_or_else(Vec::new, |g| gust_turbulence(g, spec.rows, spec.cols, intervals));
    let forces = ForceField { wind: gravity + Vec3::from(spec.wind), turbulence };
    let initial = ClothState { x: tilted_positions(&model, spec.tilt_deg), v: vec![Vec3::zeros(); model.len()] };
    let solver = SolverConfig { tolerance: 1e-8, ..SolverConfig::default() };
    let truth = rollout(&model, &initial, &params, &forces, intervals, spec.anchor_mode, &solver)?;
    if !truth.is_complete() {
        return Err(Error::Diverged("ground-truth simulation".into()));
    }
    let texture = pattern_texture(spec.texture_size, spec.seed);
    let camera = default_camera(spec.rows, spec.cols, spec.width, spec.height, spec.fov_deg)?;
    let uv_true = distorted_uv(spec.rows, spec.cols, spec.uv_distortion);
    let renderer = Renderer::for_grid(spec.rows, spec.cols, camera, texture.clone());
    let rendered = par::map(&truth.states, |s| {
        let out = renderer.render(&s.x, &uv_true);
        let mut mask = out.mask.clone();
        mask.data.iter_mut().for_each(|m| *m = if *m > 0.5 { 1.0 } else { 0.0 });
        (out.rgb, mask)
    });
    let (frames, masks): (Vec<Image>, Vec<Image>) = rendered.into_iter().unzip();
    let scene = Scene { model, initial, renderer, uv: grid_uv(spec.rows, spec.cols), frames, masks: Some(masks), gravity };
    Ok(SynthScene { scene, truth, params, forces, uv: uv_true, texture })
}

/// Chamfer distance per frame between two simulations of the same grid, in units where the
/// template is one unit wide. Both clouds of a frame are drawn with the same seed.
pub fn trajectory_chamfer(a: &Trajectory, b: &Trajectory, n_points: usize, seed: u64) -> Result<Vec<f64>> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::invalid("trajectories have different grids"));
    }
    let faces = triangulate(a.rows, a.cols);
    let scale = 1.0 / (a.cols - 1) as f64;
    let frames = a.states.len().min(b.states.len());
    let out = par::map_range(frames, |f| -> Result<f64> {
        let pa: Vec<Vec3> = a.states[f].x.iter().map(|p| p * scale).collect();
        let pb: Vec<Vec3> = b.states[f].x.iter().map(|p| p * scale).collect();
        let sa = sample_surface(&pa, &faces, n_points, seed.wrapping_add(f as u64))?;
        let sb = sample_surface(&pb, &faces, n_points, seed.wrapping_add(f as u64))?;
        chamfer(&sa, &sb)
    });
    out.into_iter().collect()
}
