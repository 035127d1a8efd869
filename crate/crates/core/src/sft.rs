//! Shape-from-template: fit stiffness, forces and texture coordinates of a simulated cloth to a
//! video.
//!
//! Every cycle simulates the active frames, renders them, compares with the targets and takes one
//! Adam step on each parameter group. The number of active frames grows as the fit proceeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloth::{ClothModel, ClothParams, ClothState, ForceField, Vec3};
use crate::diff::{adam_update, rollout_grad, AdamConfig, ParamGroup, Projection};
use crate::integrator::{rollout, AnchorMode, RolloutStatus, SolverConfig, Trajectory};
use crate::par;
use crate::render::{image_loss, silhouette_loss, Image, Renderer, SilhouetteNorm, UvMap};
use crate::{Error, Result};

/// Which parameter groups are optimised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimize {
    pub stiffness: bool,
    pub wind: bool,
    pub turbulence: bool,
    pub uv: bool,
    pub initial_positions: bool,
}

impl Default for Optimize {
    fn default() -> Self {
        Self { stiffness: true, wind: true, turbulence: true, uv: true, initial_positions: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfTConfig {
    pub n_cycles: usize,
    pub warmup_frames: usize,
    /// A frame is added after this many cycles.
    pub cycles_per_frame: usize,
    /// With `false` all frames are active from the first cycle.
    pub successive: bool,
    pub stiffness_init: [f64; 3],
    pub stiffness_lr: [f64; 3],
    pub stiffness_min: [f64; 3],
    /// Wind learning rate as a multiple of `|g|`.
    pub wind_lr_scale: f64,
    pub turbulence_lr: f64,
    pub uv_lr: f64,
    pub initial_positions_lr: f64,
    pub reg_alpha: f64,
    pub reg_beta: f64,
    pub reg_gamma: f64,
    pub regularize: bool,
    /// Keep the gravity-direction component of the wind at its initial value and that of the
    /// turbulence at zero.
    pub wind_horizontal_only: bool,
    pub use_silhouette: bool,
    pub blur_sigma: f64,
    pub silhouette_norm: SilhouetteNorm,
    /// Average the image terms over active frames instead of summing them.
    pub frame_mean: bool,
    pub steps_per_frame: usize,
    pub anchor_mode: AnchorMode,
    pub optimize: Optimize,
    pub adam: AdamConfig,
    pub solver: SolverConfig,
}

impl Default for SfTConfig {
    fn default() -> Self {
        Self {
            n_cycles: 250,
            warmup_frames: 10,
            cycles_per_frame: 5,
            successive: true,
            stiffness_init: [3000.0, 8.0, 0.5],
            stiffness_lr: [50.0, 0.1, 0.01],
            stiffness_min: [10.0, 0.01, 1e-5],
            wind_lr_scale: 0.05,
            turbulence_lr: 1e-3,
            uv_lr: 2e-4,
            initial_positions_lr: 1e-3,
            reg_alpha: 1e-2,
            reg_beta: 1e-3,
            reg_gamma: 1e-2,
            regularize: true,
            wind_horizontal_only: true,
            use_silhouette: true,
            blur_sigma: 7.0,
            silhouette_norm: SilhouetteNorm::L1,
            frame_mean: false,
            steps_per_frame: 1,
            anchor_mode: AnchorMode::HardAnchors,
            optimize: Optimize::default(),
            adam: AdamConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl SfTConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.wind_lr_scale, self.turbulence_lr, self.uv_lr, self.initial_positions_lr];
        if !self.stiffness_lr.iter().chain(&lrs).all(|&l| l > 0.0 && l.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup_frames == 0 || self.cycles_per_frame == 0 || self.steps_per_frame == 0 {
            return Err(Error::Config("warmup_frames, cycles_per_frame and steps_per_frame must be positive".into()));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::Config("blur_sigma must be positive".into()));
        }
        if self.stiffness_init.iter().zip(&self.stiffness_min).any(|(i, m)| !(i >= m && *m > 0.0)) {
            return Err(Error::Config("stiffness_init must respect stiffness_min".into()));
        }
        Ok(())
    }
}

/// Number of frames used at `cycle`.
pub fn frame_schedule(cycle: usize, total_frames: usize, cfg: &SfTConfig) -> usize {
    if !cfg.successive {
        return total_frames;
    }
    total_frames.min(cfg.warmup_frames + cycle / cfg.cycles_per_frame)
}

/// Quadratic penalty on the turbulent forces, with its gradient.
///
/// `α Σ|T|² + β Σ|T_{t+1} - T_t|² + γ Σ` (squared differences to the right and lower grid
/// neighbours).
pub fn regularize_turbulence(t: &[Vec<Vec3>], rows: usize, cols: usize, alpha: f64, beta: f64, gamma: f64) -> (f64, Vec<Vec<Vec3>>) {
    let mut grad: Vec<Vec<Vec3>> = t.iter().map(|f| vec![Vec3::zeros(); f.len()]).collect();
    let mut val = 0.0;
    for (k, frame) in t.iter().enumerate() {
        for (v, x) in frame.iter().enumerate() {
            val += alpha * x.norm_squared();
            grad[k][v] += x * (2.0 * alpha);
        }
        if let Some(next) = t.get(k + 1) {
            for v in 0..frame.len() {
                let d = next[v] - frame[v];
                val += beta * d.norm_squared();
                grad[k + 1][v] += d * (2.0 * beta);
                grad[k][v] -= d * (2.0 * beta);
            }
        }
        for i in 0..rows {
            for j in 0..cols {
                let a = i * cols + j;
                for b in [(j + 1 < cols).then(|| a + 1), (i + 1 < rows).then(|| a + cols)].into_iter().flatten() {
                    let d = frame[b] - frame[a];
                    val += gamma * d.norm_squared();
                    grad[k][b] += d * (2.0 * gamma);
                    grad[k][a] -= d * (2.0 * gamma);
                }
            }
        }
    }
    (val, grad)
}

/// Parts of the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub image: f64,
    pub silhouette: f64,
    pub regularizer: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.image + self.silhouette + self.regularizer
    }
}

/// Loss of rendered frames against targets plus the turbulence penalty.
///
/// Frames are paired by index; masks may be omitted, which drops the silhouette term.
pub fn sft_loss(rgb: &[Image], targets: &[Image], masks: Option<(&[Image], &[Image])>, turbulence: &[Vec<Vec3>], rows: usize, cols: usize, cfg: &SfTConfig) -> LossParts {
    let scale = if cfg.frame_mean { 1.0 / rgb.len().max(1) as f64 } else { 1.0 };
    let image = rgb.iter().zip(targets).map(|(a, b)| image_loss(a, b).0).sum::<f64>() * scale;
    let silhouette = masks.map_or(0.0, |(m, t)| m.iter().zip(t).map(|(a, b)| silhouette_loss(a, b, cfg.blur_sigma, cfg.silhouette_norm).0).sum::<f64>() * scale);
    let regularizer = if cfg.regularize { regularize_turbulence(turbulence, rows, cols, cfg.reg_alpha, cfg.reg_beta, cfg.reg_gamma).0 } else { 0.0 };
    LossParts { image, silhouette, regularizer }
}

/// Observed video and everything needed to simulate and render the template.
#[derive(Clone, Debug)]
pub struct Scene {
    pub model: ClothModel,
    /// Template state at frame 0, in normalised units.
    pub initial: ClothState,
    /// Camera in normalised units.
    pub renderer: Renderer,
    pub uv: UvMap,
    pub frames: Vec<Image>,
    pub masks: Option<Vec<Image>>,
    /// Gravity as a normalised acceleration.
    pub gravity: Vec3,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.model.len();
        if self.initial.x.len() != n || self.initial.v.len() != n || self.uv.len() != n {
            return Err(Error::Config("template, state and uv sizes disagree".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::Config("scene has no frames".into()));
        }
        let (w, h) = (self.renderer.camera.width, self.renderer.camera.height);
        if self.frames.iter().any(|f| f.width != w || f.height != h || f.channels != 3) {
            return Err(Error::Config(format!("frames must be {w}x{h} RGB")));
        }
        if let Some(m) = &self.masks {
            if m.len() != self.frames.len() {
                return Err(Error::Config(format!("{} masks for {} frames", m.len(), self.frames.len())));
            }
            if m.iter().any(|f| f.width != w || f.height != h || f.channels != 1) {
                return Err(Error::Config(format!("masks must be {w}x{h} single-channel")));
            }
        }
        Ok(())
    }
}

/// One row of the reconstruction log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleLog {
    pub cycle: usize,
    pub active_frames: usize,
    pub image_loss: f64,
    pub silhouette_loss: f64,
    pub regularizer: f64,
    pub stretch: f64,
    pub shear: f64,
    pub bend: f64,
    pub wind_norm: f64,
    pub max_turbulence: f64,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfTStatus {
    Finished,
    /// The simulation blew up twice; the result holds the last good parameters.
    Aborted { cycle: usize },
}

#[derive(Clone, Debug)]
pub struct SfTResult {
    pub params: ClothParams,
    /// Turbulence per frame interval.
    pub forces: ForceField,
    pub uv: UvMap,
    pub initial: ClothState,
    /// Simulation of all frames with the final parameters.
    pub trajectory: Trajectory,
    pub log: Vec<CycleLog>,
    pub seconds: f64,
    pub status: SfTStatus,
}

/// Incremental optimiser; call [`Reconstruction::cycle`] repeatedly.
pub struct Reconstruction<'a> {
    scene: &'a Scene,
    cfg: SfTConfig,
    stiffness: [ParamGroup; 3],
    wind: ParamGroup,
    turbulence: ParamGroup,
    uv: ParamGroup,
    x0: ParamGroup,
    cycle: usize,
    diverged: usize,
    status: SfTStatus,
    log: Vec<CycleLog>,
    started: Instant,
}

impl<'a> Reconstruction<'a> {
    pub fn new(scene: &'a Scene, cfg: SfTConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        if scene.masks.is_none() && cfg.use_silhouette {
            log::warn!("scene has no masks; silhouette term disabled");
        }
        let nv = scene.model.len();
        let intervals = scene.n_frames().saturating_sub(1);
        let stiffness = [0, 1, 2].map(|k| {
            ParamGroup::new(["stretch", "shear", "bend"][k], cfg.stiffness_lr[k], vec![cfg.stiffness_init[k]]).with_lower(vec![cfg.stiffness_min[k]])
        });
        let g = scene.gravity;
        let gnorm = g.norm();
        let axis = if gnorm > 0.0 { Some(g / gnorm) } else { None };
        let mut wind = ParamGroup::new("wind", cfg.wind_lr_scale * gnorm.max(f64::MIN_POSITIVE), g.as_slice().to_vec());
        let mut turbulence = ParamGroup::new("turbulence", cfg.turbulence_lr, vec![0.0; intervals * nv * 3]);
        if let (true, Some(axis)) = (cfg.wind_horizontal_only, axis) {
            wind = wind.with_projection(Projection::FixAxis { axis, value: gnorm });
            turbulence = turbulence.with_projection(Projection::FixAxis { axis, value: 0.0 });
        }
        let uv = ParamGroup::new("uv", cfg.uv_lr, scene.uv.iter().flat_map(|u| [u[0], u[1]]).collect());
        let x0 = ParamGroup::new("x0", cfg.initial_positions_lr, scene.initial.x.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
        Ok(Self { scene, cfg, stiffness, wind, turbulence, uv, x0, cycle: 0, diverged: 0, status: SfTStatus::Finished, log: Vec::new(), started: Instant::now() })
    }

    pub fn config(&self) -> &SfTConfig {
        &self.cfg
    }

    pub fn cycles_done(&self) -> usize {
        self.cycle
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self.status, SfTStatus::Aborted { .. })
    }

    pub fn log(&self) -> &[CycleLog] {
        &self.log
    }

    pub fn params(&self) -> ClothParams {
        ClothParams::new(self.stiffness[0].values[0], self.stiffness[1].values[0], self.stiffness[2].values[0])
    }

    pub fn wind(&self) -> Vec3 {
        Vec3::from_column_slice(&self.wind.values)
    }

    /// Current forces with one turbulence entry per frame interval.
    pub fn force_field(&self) -> ForceField {
        let nv = self.scene.model.len();
        let turbulence = self.turbulence.values.chunks_exact(3 * nv).map(|f| f.chunks_exact(3).map(Vec3::from_column_slice).collect()).collect();
        ForceField { wind: self.wind(), turbulence }
    }

    pub fn uv(&self) -> UvMap {
        self.uv.values.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn initial_state(&self) -> ClothState {
        ClothState { x: self.x0.values.chunks_exact(3).map(Vec3::from_column_slice).collect(), v: self.scene.initial.v.clone() }
    }

    /// Force field indexed by simulation step.
    fn step_forces(&self, ff: &ForceField) -> ForceField {
        let k = self.cfg.steps_per_frame;
        if k == 1 {
            return ff.clone();
        }
        ForceField { wind: ff.wind, turbulence: ff.turbulence.iter().flat_map(|t| std::iter::repeat_n(t.clone(), k)).collect() }
    }

    /// Simulates `frames` frames with the current parameters; returns one state per frame.
    pub fn simulate(&self, frames: usize) -> Result<Trajectory> {
        let k = self.cfg.steps_per_frame;
        let ff = self.step_forces(&self.force_field());
        let tr = rollout(&self.scene.model, &self.initial_state(), &self.params(), &ff, frames.saturating_sub(1) * k, self.cfg.anchor_mode, &self.cfg.solver)?;
        Ok(subsample(tr, k))
    }

    /// One optimisation cycle. Returns the log row, or `None` once aborted.
    pub fn cycle(&mut self) -> Result<Option<CycleLog>> {
        if self.is_aborted() {
            return Ok(None);
        }
        let t0 = Instant::now();
        let scene = self.scene;
        let cfg = &self.cfg;
        let nv = scene.model.len();
        let active = frame_schedule(self.cycle, scene.n_frames(), cfg);
        let k = cfg.steps_per_frame;
        let params = self.params();
        let ff_frames = self.force_field();
        let ff = self.step_forces(&ff_frames);
        let x0 = self.initial_state();
        let uv = self.uv();
        let tr = rollout(&scene.model, &x0, &params, &ff, (active - 1) * k, cfg.anchor_mode, &cfg.solver)?;

        let use_sil = cfg.use_silhouette && scene.masks.is_some();
        let mut parts = LossParts::default();
        let mut grads = None;
        if tr.status == RolloutStatus::Complete {
            let scale = if cfg.frame_mean { 1.0 / active as f64 } else { 1.0 };
            let renderer = &scene.renderer;
            let per_frame = par::map_range(active, |f| {
                let out = renderer.render(&tr.states[f * k].x, &uv);
                let (li, mut di) = image_loss(&out.rgb, &scene.frames[f]);
                di.data.iter_mut().for_each(|d| *d *= scale);
                let (ls, dm) = if use_sil {
                    let (ls, mut dm) = silhouette_loss(&out.mask, &scene.masks.as_ref().expect("checked")[f], cfg.blur_sigma, cfg.silhouette_norm);
                    dm.data.iter_mut().for_each(|d| *d *= scale);
                    (ls, Some(dm))
                } else {
                    (0.0, None)
                };
                let g = renderer.backward(&out, &uv, Some(&di), dm.as_ref());
                (li * scale, ls * scale, g)
            });
            let mut x_cot = vec![vec![Vec3::zeros(); nv]; tr.states.len()];
            let mut uv_grad = vec![0.0; 2 * nv];
            for (f, (li, ls, g)) in per_frame.into_iter().enumerate() {
                parts.image += li;
                parts.silhouette += ls;
                x_cot[f * k] = g.positions;
                for (v, u) in g.uv.iter().enumerate() {
                    uv_grad[2 * v] += u[0];
                    uv_grad[2 * v + 1] += u[1];
                }
            }
            let n_active_t = (active - 1).min(ff_frames.turbulence.len());
            let (reg, reg_grad) = if cfg.regularize {
                regularize_turbulence(&ff_frames.turbulence[..n_active_t], scene.model.rows, scene.model.cols, cfg.reg_alpha, cfg.reg_beta, cfg.reg_gamma)
            } else {
                (0.0, vec![vec![Vec3::zeros(); nv]; n_active_t])
            };
            parts.regularizer = reg;
            if parts.total().is_finite() {
                match rollout_grad(&scene.model, &tr, &params, &ff, &x_cot, None, cfg.anchor_mode, &cfg.solver) {
                    Ok(g) => grads = Some((g, uv_grad, reg_grad, n_active_t)),
                    Err(Error::Diverged(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }

        let skipped = grads.is_none();
        if let Some((g, uv_grad, reg_grad, n_active_t)) = grads {
            let mut t_grad = vec![0.0; self.turbulence.values.len()];
            for (step, gt) in g.turbulence.iter().enumerate() {
                let f = step / k;
                for v in 0..nv {
                    for c in 0..3 {
                        t_grad[(f * nv + v) * 3 + c] += gt[v][c];
                    }
                }
            }
            for (f, rg) in reg_grad.iter().enumerate() {
                for v in 0..nv {
                    for c in 0..3 {
                        t_grad[(f * nv + v) * 3 + c] += rg[v][c];
                    }
                }
            }
            let opt = cfg.optimize;
            let mut groups: Vec<ParamGroup> = Vec::new();
            let mut gs: Vec<Vec<f64>> = Vec::new();
            if opt.stiffness {
                for (p, grp) in self.stiffness.iter().enumerate() {
                    groups.push(grp.clone());
                    gs.push(vec![g.params[p]]);
                }
            }
            if opt.wind {
                groups.push(self.wind.clone());
                gs.push(g.wind.as_slice().to_vec());
            }
            if opt.turbulence {
                let mut t = self.turbulence.clone();
                t.active = n_active_t * nv * 3;
                groups.push(t);
                gs.push(t_grad);
            }
            if opt.uv {
                groups.push(self.uv.clone());
                gs.push(uv_grad);
            }
            if opt.initial_positions {
                groups.push(self.x0.clone());
                gs.push(g.x0.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
            }
            adam_update(&mut groups, &gs, &cfg.adam);
            for grp in groups {
                match grp.name.as_str() {
                    "stretch" => self.stiffness[0] = grp,
                    "shear" => self.stiffness[1] = grp,
                    "bend" => self.stiffness[2] = grp,
                    "wind" => self.wind = grp,
                    "turbulence" => self.turbulence = grp,
                    "uv" => self.uv = grp,
                    _ => self.x0 = grp,
                }
            }
        } else {
            self.diverged += 1;
            if self.diverged == 1 {
                log::warn!("cycle {}: simulation diverged, halving the turbulence learning rate", self.cycle);
                self.turbulence.lr *= 0.5;
            } else {
                log::warn!("cycle {}: simulation diverged again, stopping", self.cycle);
                self.status = SfTStatus::Aborted { cycle: self.cycle };
            }
        }

        let p = self.params();
        let max_t = self.turbulence.values.chunks_exact(3).map(|c| Vec3::from_column_slice(c).norm()).fold(0.0, f64::max);
        let row = CycleLog {
            cycle: self.cycle,
            active_frames: active,
            image_loss: parts.image,
            silhouette_loss: parts.silhouette,
            regularizer: parts.regularizer,
            stretch: p.stretch,
            shear: p.shear,
            bend: p.bend,
            wind_norm: self.wind().norm(),
            max_turbulence: max_t,
            seconds: t0.elapsed().as_secs_f64(),
            skipped,
        };
        self.log.push(row.clone());
        self.cycle += 1;
        Ok(Some(row))
    }

    /// Simulates the whole video with the current parameters and packages the result.
    pub fn finish(self) -> Result<SfTResult> {
        let trajectory = self.simulate(self.scene.n_frames())?;
        Ok(SfTResult {
            params: self.params(),
            forces: self.force_field(),
            uv: self.uv(),
            initial: self.initial_state(),
            trajectory,
            seconds: self.started.elapsed().as_secs_f64(),
            status: self.status,
            log: self.log,
        })
    }
}

fn subsample(tr: Trajectory, k: usize) -> Trajectory {
    if k == 1 {
        return tr;
    }
    let states = tr.states.into_iter().step_by(k).collect();
    Trajectory { states, ..tr }
}

/// Runs `cfg.n_cycles` cycles, calling `on_cycle` after each one.
pub fn reconstruct_with(scene: &Scene, cfg: SfTConfig, mut on_cycle: impl FnMut(&CycleLog)) -> Result<SfTResult> {
    let n = cfg.n_cycles;
    let mut rec = Reconstruction::new(scene, cfg)?;
    for _ in 0..n {
        match rec.cycle()? {
            Some(row) => on_cycle(&row),
            None => break,
        }
    }
    rec.finish()
}

pub fn reconstruct(scene: &Scene, cfg: SfTConfig) -> Result<SfTResult> {
    reconstruct_with(scene, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = SfTConfig::default();
        assert_eq!(frame_schedule(0, 50, &cfg), 10);
        assert_eq!(frame_schedule(4, 50, &cfg), 10);
        assert_eq!(frame_schedule(5, 50, &cfg), 11);
        assert_eq!(frame_schedule(1000, 50, &cfg), 50);
        assert_eq!(frame_schedule(0, 6, &cfg), 6);
        let all = SfTConfig { successive: false, ..cfg };
        assert_eq!(frame_schedule(0, 50, &all), 50);
        let mut prev = 0;
        for c in 0..400 {
            let a = frame_schedule(c, 60, &SfTConfig::default());
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn regularizer_zero_and_constant() {
        let (v, _) = regularize_turbulence(&vec![vec![Vec3::zeros(); 12]; 4], 3, 4, 1e-2, 1e-3, 1e-2);
        assert_eq!(v, 0.0);
        let c = Vec3::new(0.3, -1.0, 2.0);
        let (v, _) = regularize_turbulence(&vec![vec![c; 12]; 5], 3, 4, 1e-2, 1e-3, 1e-2);
        assert!((v - 1e-2 * 5.0 * 12.0 * c.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn regularizer_gradient_matches_fd() {
        let (rows, cols, nt) = (3, 4, 3);
        let t: Vec<Vec<Vec3>> = (0..nt).map(|k| (0..rows * cols).map(|v| Vec3::new((k * 7 + v) as f64 * 0.1, ((v * 3) % 5) as f64 - 2.0, (k as f64 - v as f64).sin())).collect()).collect();
        let (_, g) = regularize_turbulence(&t, rows, cols, 1e-2, 1e-3, 1e-2);
        let h = 1e-4;
        for (k, v, c) in [(0, 0, 0), (1, 5, 1), (2, 11, 2), (1, 6, 0)] {
            let mut p = t.clone();
            p[k][v][c] += h;
            let mut m = t.clone();
            m[k][v][c] -= h;
            let fd = (regularize_turbulence(&p, rows, cols, 1e-2, 1e-3, 1e-2).0 - regularize_turbulence(&m, rows, cols, 1e-2, 1e-3, 1e-2).0) / (2.0 * h);
            assert!((fd - g[k][v][c]).abs() <= 1e-8 * fd.abs().max(1e-6), "{fd} vs {}", g[k][v][c]);
        }
    }

    #[test]
    fn loss_is_sum_of_parts() {
        let cfg = SfTConfig::default();
        let a = Image::from_fn(8, 6, 3, |x, y, c| ((x + y + c) % 3) as f64 / 2.0);
        let b = Image::filled(8, 6, &[0.5; 3]);
        let m = Image::from_fn(8, 6, 1, |x, _, _| (x > 3) as u8 as f64);
        let z = Image::zeros(8, 6, 1);
        let t = vec![vec![Vec3::new(0.1, 0.0, 0.0); 4]];
        let parts = sft_loss(&[a.clone()], &[b.clone()], Some((&[m.clone()], &[z.clone()])), &t, 2, 2, &cfg);
        assert_eq!(parts.image, image_loss(&a, &b).0);
        assert_eq!(parts.silhouette, silhouette_loss(&m, &z, 7.0, SilhouetteNorm::L1).0);
        assert_eq!(parts.regularizer, regularize_turbulence(&t, 2, 2, 1e-2, 1e-3, 1e-2).0);
        let perfect = sft_loss(&[b.clone()], &[b], Some((&[z.clone()], &[z])), &[vec![Vec3::zeros(); 4]], 2, 2, &cfg);
        assert_eq!(perfect.total(), 0.0);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(SfTConfig::default().validate().is_ok());
        assert!(SfTConfig { uv_lr: 0.0, ..SfTConfig::default() }.validate().is_err());
        assert!(SfTConfig { warmup_frames: 0, ..SfTConfig::default() }.validate().is_err());
        assert!(SfTConfig { stiffness_init: [5.0, 8.0, 0.5], ..SfTConfig::default() }.validate().is_err());
    }
}
