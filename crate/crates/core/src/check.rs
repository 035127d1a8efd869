//! Finite-difference check of the whole gradient pipeline on a small random scene.
//!
//! Stiffness, wind and turbulence are checked through a position loss on the rolled-out frames,
//! uv-coordinates through the image loss of the rendered frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloth::{ClothModel, ClothParams, ClothState, ForceField, Vec3};
use crate::diff::{fd_check, rollout_grad, FdReport};
use crate::integrator::{rollout, AnchorMode, SolverConfig, Trajectory};
use crate::render::{grid_uv, image_loss, Image, Renderer};
use crate::synth::{default_camera, distorted_uv, pattern_texture, tilted_positions};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSpec {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    pub seed: u64,
    /// Central-difference step relative to `max(|θ|, 1)`.
    pub rel_step: f64,
    /// Number of turbulence and of uv entries sampled.
    pub samples: usize,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self { rows: 4, cols: 4, frames: 3, seed: 0, rel_step: 1e-6, samples: 6 }
    }
}

struct Setup {
    model: ClothModel,
    initial: ClothState,
    solver: SolverConfig,
    targets: Vec<Vec<Vec3>>,
}

impl Setup {
    fn simulate(&self, theta: &[f64]) -> Result<Trajectory> {
        let n = self.model.len();
        let params = ClothParams::new(theta[0], theta[1], theta[2]);
        let steps = self.targets.len() - 1;
        let turbulence = (0..steps).map(|t| (0..n).map(|v| Vec3::from_column_slice(&theta[6 + (t * n + v) * 3..][..3])).collect()).collect();
        let ff = ForceField { wind: Vec3::new(theta[3], theta[4], theta[5]), turbulence };
        let tr = rollout(&self.model, &self.initial, &params, &ff, steps, AnchorMode::HardAnchors, &self.solver)?;
        if !tr.is_complete() || !tr.all_converged() {
            return Err(Error::Diverged("gradient check rollout".into()));
        }
        Ok(tr)
    }

    fn position_loss(&self, tr: &Trajectory) -> f64 {
        tr.states.iter().zip(&self.targets).skip(1).map(|(s, t)| s.x.iter().zip(t).map(|(x, y)| 0.5 * (x - y).norm_squared()).sum::<f64>()).sum()
    }
}

fn uv_loss(renderer: &Renderer, frames: &[Vec<Vec3>], targets: &[Image], uv: &[f64]) -> f64 {
    let uv: Vec<[f64; 2]> = uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    frames.iter().zip(targets).map(|(x, t)| image_loss(&renderer.render(x, &uv).rgb, t).0).sum()
}

/// Runs the check and returns one row per checked entry.
pub fn gradient_check(spec: &GradCheckSpec) -> Result<FdReport> {
    if spec.frames < 2 || spec.samples == 0 {
        return Err(Error::invalid("the gradient check needs at least two frames and one sample"));
    }
    let model = ClothModel::new(spec.rows, spec.cols)?;
    let n = model.len();
    let steps = spec.frames - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = |a: f64| Vec3::new(rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a));

    let mut initial = ClothState { x: tilted_positions(&model, 30.0), v: vec![Vec3::zeros(); n] };
    let free = AnchorMode::HardAnchors.free_mask(&model);
    for k in (0..n).filter(|&k| free[k]) {
        initial.x[k] += jitter(0.05);
        initial.v[k] = jitter(0.05);
    }
    let mut theta = vec![50.0, 2.0, 0.3, 0.05, -0.3, 0.02];
    for _ in 0..steps * n {
        theta.extend(jitter(0.05).iter());
    }
    let solver = SolverConfig { tolerance: 1e-12, ..SolverConfig::default() };
    let mut setup = Setup { model, initial, solver, targets: Vec::new() };
    setup.targets = vec![vec![Vec3::zeros(); n]; spec.frames];
    let base = setup.simulate(&theta)?;
    setup.targets = base.states.iter().map(|s| s.x.iter().map(|x| x + jitter(0.5)).collect()).collect();

    let x_cot: Vec<Vec<Vec3>> = base.states.iter().zip(&setup.targets).enumerate().map(|(f, (s, t))| if f == 0 { vec![Vec3::zeros(); n] } else { s.x.iter().zip(t).map(|(x, y)| x - y).collect() }).collect();
    let params = ClothParams::new(theta[0], theta[1], theta[2]);
    let ff_turb = (0..steps).map(|t| (0..n).map(|v| Vec3::from_column_slice(&theta[6 + (t * n + v) * 3..][..3])).collect()).collect();
    let ff = ForceField { wind: Vec3::new(theta[3], theta[4], theta[5]), turbulence: ff_turb };
    let g = rollout_grad(&setup.model, &base, &params, &ff, &x_cot, None, AnchorMode::HardAnchors, &setup.solver)?;
    let mut analytic = g.params.to_vec();
    analytic.extend(g.wind.iter());
    for t in &g.turbulence {
        for v in t {
            analytic.extend(v.iter());
        }
    }

    let mut which: Vec<(usize, String)> = ["Y", "S", "B", "w_x", "w_y", "w_z"].iter().enumerate().map(|(k, s)| (k, s.to_string())).collect();
    let free_ids: Vec<usize> = (0..n).filter(|&k| free[k]).collect();
    for _ in 0..spec.samples {
        let (t, v, c) = (rng.gen_range(0..steps), free_ids[rng.gen_range(0..free_ids.len())], rng.gen_range(0..3));
        which.push((6 + (t * n + v) * 3 + c, format!("T[{t}][{v}].{}", ["x", "y", "z"][c])));
    }
    which.dedup();
    let mut report = fd_check(|th| setup.simulate(th).map_or(f64::NAN, |tr| setup.position_loss(&tr)), &theta, &analytic, spec.rel_step, &which, 1e-10);

    let camera = default_camera(spec.rows, spec.cols, 48, 48, 50.0)?;
    let renderer = Renderer::for_grid(spec.rows, spec.cols, camera, pattern_texture(64, spec.seed));
    let frames: Vec<Vec<Vec3>> = base.states.iter().map(|s| s.x.clone()).collect();
    let true_uv = distorted_uv(spec.rows, spec.cols, 0.05);
    let targets: Vec<Image> = frames.iter().map(|x| renderer.render(x, &true_uv).rgb).collect();
    let uv0: Vec<f64> = grid_uv(spec.rows, spec.cols).iter().flat_map(|u| [u[0], u[1]]).collect();
    let uv_pairs: Vec<[f64; 2]> = uv0.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut uv_grad = vec![0.0; uv0.len()];
    for (x, t) in frames.iter().zip(&targets) {
        let out = renderer.render(x, &uv_pairs);
        let (_, d) = image_loss(&out.rgb, t);
        for (v, gv) in renderer.backward(&out, &uv_pairs, Some(&d), None).uv.iter().enumerate() {
            uv_grad[2 * v] += gv[0];
            uv_grad[2 * v + 1] += gv[1];
        }
    }
    let mut visible: Vec<usize> = (0..uv0.len()).filter(|&k| uv_grad[k] != 0.0).collect();
    if visible.is_empty() {
        return Err(Error::invalid("no uv entry affects the rendered frames"));
    }
    let mut uv_which = Vec::new();
    for _ in 0..spec.samples.min(visible.len()) {
        let k = visible.swap_remove(rng.gen_range(0..visible.len()));
        uv_which.push((k, format!("uv[{}].{}", k / 2, ["u", "v"][k % 2])));
    }
    let uv_report = fd_check(|uv| uv_loss(&renderer, &frames, &targets, uv), &uv0, &uv_grad, spec.rel_step, &uv_which, 1e-10);

    report.rows.extend(uv_report.rows);
    report.rows.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    report.max_rel_err = report.rows.first().map_or(0.0, |r| r.rel_err);
    Ok(report)
}
