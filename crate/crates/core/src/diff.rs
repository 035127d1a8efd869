//! Reverse-mode gradients through implicit rollouts, finite-difference checks and Adam.
//!
//! Each step solves `r(a) = M a + ∇E_int(x + v + a) - F_ext = 0`. Differentiating that relation
//! gives `da = -(M + H)⁻¹ (H dx + H dv + ∂r/∂θ dθ)`, so one linear solve per step carries the
//! cotangent of `a` back to the previous state and to the parameters. Nothing from the Newton
//! iterations is stored.

use std::fmt;

use crate::cloth::{ClothModel, ClothParams, ForceField, Vec3};
use crate::energy::{assemble_hessian, unit_forces};
use crate::integrator::{AnchorMode, SolverConfig, Trajectory};
use crate::sparse::{minres, CgOptions};
use crate::{Error, Result};

/// Gradient of a trajectory loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryGrad {
    /// `(dY, dS, dB)`.
    pub params: [f64; 3],
    pub wind: Vec3,
    /// Per step, per vertex.
    pub turbulence: Vec<Vec<Vec3>>,
    pub x0: Vec<Vec3>,
    pub v0: Vec<Vec3>,
    /// Some forward step did not converge, so the gradient is only approximate.
    pub approximate: bool,
}

/// Cotangents `λx, λv` carried backwards in time.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

/// Backpropagates per-state loss cotangents through a rollout.
///
/// `x_cot[n]` is `∂loss/∂x_n` for `states[n]`; missing trailing entries are zero, as is
/// `v_cot` when `None`.
pub fn rollout_grad(
    model: &ClothModel,
    traj: &Trajectory,
    params: &ClothParams,
    forces: &ForceField,
    x_cot: &[Vec<Vec3>],
    v_cot: Option<&[Vec<Vec3>]>,
    mode: AnchorMode,
    cfg: &SolverConfig,
) -> Result<TrajectoryGrad> {
    let n = model.len();
    if traj.states.is_empty() {
        return Err(Error::invalid("trajectory has no states"));
    }
    if x_cot.len() > traj.states.len() || v_cot.is_some_and(|c| c.len() > traj.states.len()) {
        return Err(Error::invalid("more cotangents than trajectory states"));
    }
    if x_cot.iter().chain(v_cot.unwrap_or(&[])).any(|c| c.len() != n) {
        return Err(Error::invalid("cotangent size must match the grid"));
    }
    let steps = traj.states.len() - 1;
    let free = mode.free_mask(model);
    let cg = CgOptions { tol: cfg.cg_tolerance.min(1e-10), max_iter: cfg.cg_max_iter.max(4 * n) };

    let zero = || vec![Vec3::zeros(); n];
    let cot = |c: Option<&[Vec<Vec3>]>, k: usize| c.and_then(|c| c.get(k)).cloned().unwrap_or_else(zero);
    let mut adj = AdjointState { x: cot(Some(x_cot), steps), v: cot(v_cot, steps) };
    let mut grad = TrajectoryGrad {
        params: [0.0; 3],
        wind: Vec3::zeros(),
        turbulence: vec![zero(); steps],
        x0: Vec::new(),
        v0: Vec::new(),
        approximate: !traj.all_converged() || !traj.is_complete(),
    };

    for t in (0..steps).rev() {
        let y = &traj.states[t + 1].x;
        let a_bar: Vec<Vec3> = (0..n).map(|k| if free[k] { adj.x[k] + adj.v[k] } else { Vec3::zeros() }).collect();

        let mut a = assemble_hessian(y, params, &model.topology);
        a.add_diagonal(&model.masses);
        let mut mu = zero();
        let out = minres(&a, &free, &a_bar, &mut mu, cg);
        if !(out.rel_residual <= 1e-6) {
            grad.approximate = true;
        }
        let mut h_mu = zero();
        a.mul(&mu, &mut h_mu);
        for k in 0..n {
            h_mu[k] -= mu[k] * model.masses[k];
        }

        let units = unit_forces(y, &model.topology);
        for (p, f) in units.iter().enumerate() {
            grad.params[p] += f.iter().zip(&mu).map(|(f, m)| f.dot(m)).sum::<f64>();
        }
        for k in 0..n {
            let g = mu[k] * model.masses[k];
            grad.wind += g;
            grad.turbulence[t][k] = g;
        }
        let _ = forces;

        let xc = cot(Some(x_cot), t);
        let vc = cot(v_cot, t);
        let next = AdjointState {
            x: (0..n).map(|k| adj.x[k] - h_mu[k] + xc[k]).collect(),
            v: (0..n).map(|k| adj.x[k] + adj.v[k] - h_mu[k] + vc[k]).collect(),
        };
        adj = next;
        if !adj.x.iter().chain(&adj.v).all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(Error::Diverged(format!("non-finite adjoint at step {t}")));
        }
    }
    grad.x0 = adj.x;
    grad.v0 = adj.v;
    Ok(grad)
}

/// One row of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdRow {
    pub name: String,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FdReport {
    /// Sorted by decreasing error.
    pub rows: Vec<FdRow>,
    pub max_rel_err: f64,
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "param\tanalytic\tfd\trel_err")?;
        for r in &self.rows {
            writeln!(f, "{}\t{:.10e}\t{:.10e}\t{:.3e}", r.name, r.analytic, r.fd, r.rel_err)?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor so that two tiny numbers compare as equal.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale <= floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences of `loss` at `theta` for the entries listed in `which`
/// (`(index, name)`), compared against `analytic`.
///
/// The step for entry `k` is `rel_step * max(|θ_k|, 1)`.
pub fn fd_check<F>(mut loss: F, theta: &[f64], analytic: &[f64], rel_step: f64, which: &[(usize, String)], floor: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut rows: Vec<FdRow> = which
        .iter()
        .map(|(k, name)| {
            let h = rel_step * theta[*k].abs().max(1.0);
            let mut p = theta.to_vec();
            p[*k] = theta[*k] + h;
            let lp = loss(&p);
            p[*k] = theta[*k] - h;
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            FdRow { name: name.clone(), analytic: analytic[*k], fd, rel_err: rel_err(analytic[*k], fd, floor) }
        })
        .collect();
    rows.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = rows.first().map_or(0.0, |r| r.rel_err);
    FdReport { rows, max_rel_err }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Constraint applied to every consecutive 3-vector of a group after an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    None,
    /// Keeps the component along the unit vector `axis` equal to `value`.
    FixAxis { axis: Vec3, value: f64 },
}

impl Projection {
    pub fn apply(&self, values: &mut [f64]) {
        if let Projection::FixAxis { axis, value } = *self {
            for c in values.chunks_exact_mut(3) {
                let p = Vec3::new(c[0], c[1], c[2]);
                let q = p + axis * (value - axis.dot(&p));
                c.copy_from_slice(q.as_slice());
            }
        }
    }
}

/// A block of parameters sharing a learning rate, bounds and projection, with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub values: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub projection: Projection,
    /// Only the first `active` entries are updated.
    pub active: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, lr: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            name: name.into(),
            lr,
            values,
            lower: None,
            projection: Projection::None,
            active: n,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        }
    }

    pub fn with_lower(mut self, lower: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.values.len());
        self.lower = Some(lower);
        self
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    /// Number of Adam steps taken by entry `k`.
    pub fn steps_taken(&self, k: usize) -> u64 {
        self.steps[k]
    }

    /// One Adam step. Returns `false` (and leaves the group untouched) if `grad` is not finite.
    ///
    /// Bias correction is tracked per entry, so entries activated late start like fresh ones.
    pub fn step(&mut self, grad: &[f64], cfg: &AdamConfig) -> bool {
        assert_eq!(grad.len(), self.values.len(), "gradient size for group {}", self.name);
        let active = self.active.min(self.values.len());
        if !grad[..active].iter().all(|g| g.is_finite()) {
            log::warn!("skipping update of {}: non-finite gradient", self.name);
            return false;
        }
        for k in 0..active {
            let g = grad[k];
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / (1.0 - cfg.beta1.powi(t));
            let vh = self.v[k] / (1.0 - cfg.beta2.powi(t));
            self.values[k] -= self.lr * mh / (vh.sqrt() + cfg.eps);
        }
        self.projection.apply(&mut self.values[..active - active % 3]);
        if let Some(lo) = &self.lower {
            for (x, l) in self.values.iter_mut().zip(lo) {
                *x = x.max(*l);
            }
        }
        true
    }
}

/// Updates every group with its gradient. Groups are independent, so order does not matter.
/// Returns the names of groups whose update was skipped.
pub fn adam_update(groups: &mut [ParamGroup], grads: &[Vec<f64>], cfg: &AdamConfig) -> Vec<String> {
    assert_eq!(groups.len(), grads.len());
    groups
        .iter_mut()
        .zip(grads)
        .filter_map(|(g, d)| (!g.step(d, cfg)).then(|| g.name.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloth::ClothState;
    use crate::integrator::rollout;

    #[test]
    fn zero_steps_give_zero_parameter_gradients() {
        let model = ClothModel::new(3, 3).unwrap();
        let s = model.rest_state();
        let traj = Trajectory::from_states(3, 3, vec![s]);
        let c = vec![vec![Vec3::new(1.0, 2.0, 3.0); 9]];
        let g = rollout_grad(&model, &traj, &ClothParams::default(), &ForceField::constant(Vec3::zeros()), &c, None, AnchorMode::Free, &SolverConfig::default()).unwrap();
        assert_eq!(g.params, [0.0; 3]);
        assert_eq!(g.wind, Vec3::zeros());
        assert_eq!(g.x0, c[0]);
    }

    /// One free step from rest with a uniform field: `a = w`, so `d(Σ z_1)/dw_z = Σ 1 = n`.
    #[test]
    fn single_free_fall_step() {
        let model = ClothModel::new(3, 4).unwrap();
        let s = model.rest_state();
        let ff = ForceField::constant(Vec3::zeros());
        let cfg = SolverConfig::default();
        let traj = rollout(&model, &s, &ClothParams::default(), &ff, 1, AnchorMode::Free, &cfg).unwrap();
        let c = vec![vec![Vec3::zeros(); 12], vec![Vec3::z(); 12]];
        let g = rollout_grad(&model, &traj, &ClothParams::default(), &ff, &c, None, AnchorMode::Free, &cfg).unwrap();
        assert!((g.wind - Vec3::new(0.0, 0.0, 12.0)).norm() < 1e-10);
        assert!(g.params.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn linear_loss_in_wind_matches_fd() {
        let model = ClothModel::new(3, 3).unwrap();
        let p = ClothParams::new(50.0, 1.0, 0.1);
        let cfg = SolverConfig { tolerance: 1e-12, ..SolverConfig::default() };
        let s = model.rest_state();
        let loss = |w: &[f64]| {
            let ff = ForceField::constant(Vec3::new(w[0], w[1], w[2]));
            let tr = rollout(&model, &s, &p, &ff, 1, AnchorMode::Free, &cfg).unwrap();
            tr.states[1].x.iter().map(|x| x.x + 2.0 * x.y - x.z).sum::<f64>()
        };
        let w = [0.1, -0.2, 0.05];
        let ff = ForceField::constant(Vec3::new(w[0], w[1], w[2]));
        let tr = rollout(&model, &s, &p, &ff, 1, AnchorMode::Free, &cfg).unwrap();
        let c = vec![vec![Vec3::zeros(); 9], vec![Vec3::new(1.0, 2.0, -1.0); 9]];
        let g = rollout_grad(&model, &tr, &p, &ff, &c, None, AnchorMode::Free, &cfg).unwrap();
        let which: Vec<_> = (0..3).map(|k| (k, format!("w{k}"))).collect();
        let rep = fd_check(loss, &w, g.wind.as_slice(), 1e-3, &which, 1e-12);
        assert!(rep.max_rel_err < 1e-8, "{rep}");
    }

    #[test]
    fn multi_step_gradients_match_fd() {
        let model = ClothModel::new(4, 4).unwrap();
        let mut s0 = model.rest_state();
        for (k, v) in s0.v.iter_mut().enumerate() {
            *v = Vec3::new(0.01 * (k as f64).cos(), 0.0, 0.05 * (k as f64 * 1.3).sin());
        }
        let cfg = SolverConfig { tolerance: 1e-12, ..SolverConfig::default() };
        let target: Vec<Vec3> = model.rest_positions().iter().map(|p| p + Vec3::new(0.1, -0.4, 0.3)).collect();
        let run = |th: &[f64]| -> (Trajectory, ClothParams, ForceField) {
            let p = ClothParams::new(th[0], th[1], th[2]);
            let mut ff = ForceField::with_turbulence(Vec3::new(th[3], th[4], th[5]), 3, 16);
            ff.turbulence[1][5] = Vec3::new(th[6], 0.0, 0.0);
            let tr = rollout(&model, &s0, &p, &ff, 3, AnchorMode::HardAnchors, &cfg).unwrap();
            (tr, p, ff)
        };
        let loss_of = |tr: &Trajectory| -> f64 {
            tr.states.iter().skip(1).map(|s| s.x.iter().zip(&target).map(|(x, t)| (x - t).norm_squared()).sum::<f64>()).sum()
        };
        let theta = [80.0, 2.0, 0.3, 0.02, -0.15, 0.04, 0.03];
        let (tr, p, ff) = run(&theta);
        let cot: Vec<Vec<Vec3>> = tr
            .states
            .iter()
            .enumerate()
            .map(|(n, s)| if n == 0 { vec![Vec3::zeros(); 16] } else { s.x.iter().zip(&target).map(|(x, t)| (x - t) * 2.0).collect() })
            .collect();
        let g = rollout_grad(&model, &tr, &p, &ff, &cot, None, AnchorMode::HardAnchors, &cfg).unwrap();
        let analytic = [g.params[0], g.params[1], g.params[2], g.wind.x, g.wind.y, g.wind.z, g.turbulence[1][5].x];
        let names = ["Y", "S", "B", "wx", "wy", "wz", "T"];
        let which: Vec<_> = names.iter().enumerate().map(|(k, n)| (k, n.to_string())).collect();
        let rep = fd_check(|th| loss_of(&run(th).0), &theta, &analytic, 1e-4, &which, 1e-9);
        assert!(rep.max_rel_err < 1e-4, "{rep}");
    }

    #[test]
    fn initial_state_gradient_matches_fd() {
        let model = ClothModel::new(3, 3).unwrap();
        let p = ClothParams::new(40.0, 1.0, 0.2);
        let cfg = SolverConfig { tolerance: 1e-12, ..SolverConfig::default() };
        let ff = ForceField::constant(Vec3::new(0.0, -0.1, 0.02));
        let base = model.rest_state();
        let run = |dz: f64| {
            let mut s = base.clone();
            s.x[4].z += dz;
            rollout(&model, &s, &p, &ff, 2, AnchorMode::Free, &cfg).unwrap()
        };
        let tr = run(0.0);
        let mut c = vec![vec![Vec3::zeros(); 9]; 3];
        c[2][1] = Vec3::new(0.3, 1.0, -2.0);
        let g = rollout_grad(&model, &tr, &p, &ff, &c, None, AnchorMode::Free, &cfg).unwrap();
        let l = |tr: &Trajectory| tr.states[2].x[1].dot(&Vec3::new(0.3, 1.0, -2.0));
        let h = 1e-5;
        let fd = (l(&run(h)) - l(&run(-h))) / (2.0 * h);
        assert!(rel_err(g.x0[4].z, fd, 1e-10) < 1e-5, "{} vs {fd}", g.x0[4].z);
        let _ = ClothState { x: vec![], v: vec![] };
    }

    #[test]
    fn fd_check_of_nothing_is_empty() {
        let rep = fd_check(|_| 0.0, &[], &[], 1e-3, &[], 0.0);
        assert!(rep.rows.is_empty());
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut g = ParamGroup::new("p", 0.1, vec![1.0, -2.0]);
        for _ in 0..10 {
            g.step(&[0.0, 0.0], &AdamConfig::default());
        }
        assert_eq!(g.values, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut g = ParamGroup::new("p", 0.5, vec![0.0, 0.0, 0.0]);
        g.step(&[3.0, -1e-3, 7e5], &AdamConfig::default());
        for (v, s) in g.values.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.5 * s).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn adam_respects_lower_bound() {
        let mut g = ParamGroup::new("Y", 50.0, vec![10.0]).with_lower(vec![10.0]);
        for _ in 0..5 {
            g.step(&[1.0], &AdamConfig::default());
            assert!(g.values[0] >= 10.0);
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut groups = vec![ParamGroup::new("a", 1.0, vec![1.0]), ParamGroup::new("b", 1.0, vec![1.0])];
        let skipped = adam_update(&mut groups, &[vec![f64::NAN], vec![1.0]], &AdamConfig::default());
        assert_eq!(skipped, vec!["a".to_string()]);
        assert_eq!(groups[0].values, vec![1.0]);
        assert!(groups[1].values[0] < 1.0);
    }

    #[test]
    fn projection_fixes_axis_component() {
        let axis = Vec3::new(0.0, -1.0, 0.0);
        let mut g = ParamGroup::new("w", 0.1, vec![0.0, -1.0, 0.0]).with_projection(Projection::FixAxis { axis, value: 1.0 });
        g.step(&[1.0, 1.0, -1.0], &AdamConfig::default());
        assert!((g.values[1] + 1.0).abs() < 1e-15);
        assert!(g.values[0] < 0.0 && g.values[2] > 0.0);
    }

    #[test]
    fn inactive_entries_are_frozen() {
        let mut g = ParamGroup::new("T", 0.1, vec![0.0; 6]);
        g.active = 3;
        g.step(&[1.0; 6], &AdamConfig::default());
        assert!(g.values[..3].iter().all(|v| *v < 0.0));
        assert!(g.values[3..].iter().all(|v| *v == 0.0));
        assert_eq!(g.steps_taken(4), 0);
    }
}
