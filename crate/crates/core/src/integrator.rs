//! Implicit time stepping of the cloth.
//!
//! One step solves `M a = F_int(x + v + a) + F_ext` for the acceleration `a` (unit time step),
//! then sets `v' = v + a` and `x' = x + v'`. The equation is the stationarity condition of the
//! step loss
//!
//! ```text
//! L(a) = E_int(x + v + a) - <F_ext, a> + ½ <a, M a>
//! ```
//!
//! which is minimised with damped Newton iterations: conjugate-gradient inner solves on
//! `M + ∇²E_int` and Armijo backtracking on `L`.

use serde::{Deserialize, Serialize};

use crate::cloth::{ClothModel, ClothParams, ClothState, ForceField, Vec3};
use crate::energy::{add_energy_gradient, assemble_hessian, internal_energy, internal_forces};
use crate::sparse::{minres, pcg, CgOptions};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Anchor vertices keep their velocity (zero acceleration).
    #[default]
    HardAnchors,
    /// Anchors move like every other vertex, driven by forces only.
    Free,
}

impl AnchorMode {
    pub fn free_mask(&self, model: &ClothModel) -> Vec<bool> {
        match self {
            AnchorMode::HardAnchors => model.anchors.iter().map(|a| !a).collect(),
            AnchorMode::Free => vec![true; model.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Converged when `|M a - F_int - F_ext|∞ <= tolerance * max(1, |F_ext|∞)`.
    pub tolerance: f64,
    pub max_newton: usize,
    pub cg_tolerance: f64,
    pub cg_max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_newton: 50, cg_tolerance: 1e-8, cg_max_iter: 200, armijo: 1e-4, max_backtracks: 40 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub a: Vec<Vec3>,
    pub x_next: Vec<Vec3>,
    pub v_next: Vec<Vec3>,
    pub residual_norm: f64,
    pub newton_iters: usize,
    pub converged: bool,
    /// Step loss after every accepted Newton iterate, starting with the initial guess.
    pub loss_history: Vec<f64>,
}

fn inf_norm(v: &[Vec3]) -> f64 {
    v.iter().map(|p| p.amax()).fold(0.0, f64::max)
}

fn check_finite(what: &str, v: &[Vec3]) -> Result<()> {
    if v.iter().all(|p| p.iter().all(|c| c.is_finite())) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

/// `E_int(x + v + a) - <F_ext, a> + ½ <a, M a>`.
pub fn step_loss(model: &ClothModel, state: &ClothState, params: &ClothParams, f_ext: &[Vec3], a: &[Vec3]) -> f64 {
    let y: Vec<Vec3> = state.x.iter().zip(&state.v).zip(a).map(|((x, v), a)| x + v + a).collect();
    let ext: f64 = f_ext.iter().zip(a).map(|(f, a)| f.dot(a)).sum();
    let inert: f64 = a.iter().zip(&model.masses).map(|(a, m)| 0.5 * m * a.norm_squared()).sum();
    internal_energy(&y, params, &model.topology) - ext + inert
}

/// `M a - F_int(x + v + a) - F_ext`, zeroed on rows that are not free.
pub fn step_residual(
    model: &ClothModel,
    state: &ClothState,
    params: &ClothParams,
    f_ext: &[Vec3],
    a: &[Vec3],
    free: &[bool],
) -> Vec<Vec3> {
    let y: Vec<Vec3> = state.x.iter().zip(&state.v).zip(a).map(|((x, v), a)| x + v + a).collect();
    let mut r = vec![Vec3::zeros(); y.len()];
    add_energy_gradient(&y, params, &model.topology, &mut r);
    for k in 0..r.len() {
        r[k] = if free[k] { r[k] + a[k] * model.masses[k] - f_ext[k] } else { Vec3::zeros() };
    }
    r
}

fn finish(state: &ClothState, a: Vec<Vec3>) -> (Vec<Vec3>, Vec<Vec3>, Vec<Vec3>) {
    let v_next: Vec<Vec3> = state.v.iter().zip(&a).map(|(v, a)| v + a).collect();
    let x_next: Vec<Vec3> = state.x.iter().zip(&v_next).map(|(x, v)| x + v).collect();
    (a, x_next, v_next)
}

/// One backward Euler step.
///
/// Returns `converged = false` with the best iterate if the Newton budget runs out or the line
/// search stalls; the caller decides what to do with it.
pub fn step_implicit(
    model: &ClothModel,
    state: &ClothState,
    params: &ClothParams,
    f_ext: &[Vec3],
    mode: AnchorMode,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    step_implicit_from(model, state, params, f_ext, mode, cfg, None)
}

/// [`step_implicit`] with an extra starting guess for `a`, used when its residual is smaller
/// than that of `M⁻¹ F_ext`.
pub fn step_implicit_from(
    model: &ClothModel,
    state: &ClothState,
    params: &ClothParams,
    f_ext: &[Vec3],
    mode: AnchorMode,
    cfg: &SolverConfig,
    guess: Option<&[Vec3]>,
) -> Result<StepResult> {
    let n = model.len();
    if state.x.len() != n || state.v.len() != n || f_ext.len() != n {
        return Err(Error::invalid("state and force sizes must match the grid"));
    }
    check_finite("positions", &state.x)?;
    check_finite("velocities", &state.v)?;
    check_finite("external forces", f_ext)?;
    if !params.is_finite() {
        return Err(Error::invalid("non-finite stiffness"));
    }
    let free = mode.free_mask(model);
    let tol = cfg.tolerance * inf_norm(f_ext).max(1.0);

    let mut a: Vec<Vec3> =
        (0..n).map(|k| if free[k] { f_ext[k] / model.masses[k] } else { Vec3::zeros() }).collect();
    let mut r = step_residual(model, state, params, f_ext, &a, &free);
    let mut rn = inf_norm(&r);
    if let Some(g) = guess.filter(|g| g.len() == n && g.iter().all(|p| p.iter().all(|c| c.is_finite()))) {
        let ag: Vec<Vec3> = (0..n).map(|k| if free[k] { g[k] } else { Vec3::zeros() }).collect();
        let rg = step_residual(model, state, params, f_ext, &ag, &free);
        let rgn = inf_norm(&rg);
        if rgn < rn {
            (a, r, rn) = (ag, rg, rgn);
        }
    }
    let mut loss = step_loss(model, state, params, f_ext, &a);
    let mut history = vec![loss];
    let mut best = (rn, a.clone());
    let mut iters = 0;
    let mut stalled = 0;
    let cg = CgOptions { tol: cfg.cg_tolerance, max_iter: cfg.cg_max_iter };

    while rn > tol && iters < cfg.max_newton {
        iters += 1;
        let y: Vec<Vec3> = state.x.iter().zip(&state.v).zip(&a).map(|((x, v), a)| x + v + a).collect();
        let mut h = assemble_hessian(&y, params, &model.topology);
        h.add_diagonal(&model.masses);
        let rhs: Vec<Vec3> = r.iter().map(|r| -r).collect();
        let mut dir = vec![Vec3::zeros(); n];
        pcg(&h, &free, &rhs, &mut dir, cg);
        let mut slope: f64 = r.iter().zip(&dir).map(|(r, d)| r.dot(d)).sum();
        if !(slope < 0.0) {
            dir = rhs.clone();
            slope = -r.iter().map(|r| r.norm_squared()).sum::<f64>();
        }

        let trial = |alpha: f64| -> Vec<Vec3> { a.iter().zip(&dir).map(|(a, d)| a + d * alpha).collect() };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let at = trial(alpha);
            let lt = step_loss(model, state, params, f_ext, &at);
            if lt.is_finite() && lt <= loss + cfg.armijo * alpha * slope {
                accepted = Some((at, lt));
                break;
            }
            alpha *= 0.5;
        }
        // Close to the minimum the loss differences drown in rounding. Then an exact Newton
        // direction is used instead and steps are accepted when they reduce the residual.
        let noise = 1e-12 * (loss.abs() + 1.0);
        let (a_new, loss_new) = match accepted {
            Some(acc) if loss - acc.1 > noise => acc,
            acc => {
                let mut exact = vec![Vec3::zeros(); n];
                minres(&h, &free, &rhs, &mut exact, CgOptions { tol: cfg.cg_tolerance.min(1e-10), max_iter: cfg.cg_max_iter.max(4 * n) });
                let mut found = None;
                let mut alpha = 1.0;
                for _ in 0..10 {
                    let at: Vec<Vec3> = a.iter().zip(&exact).map(|(a, d)| a + d * alpha).collect();
                    let lt = step_loss(model, state, params, f_ext, &at);
                    let rt = inf_norm(&step_residual(model, state, params, f_ext, &at, &free));
                    if rt < rn && lt <= loss + noise {
                        found = Some((at, lt.min(loss)));
                        break;
                    }
                    alpha *= 0.5;
                }
                match found.or(acc) {
                    Some(f) => f,
                    None => break,
                }
            }
        };
        let flat = loss - loss_new <= noise;
        a = a_new;
        loss = loss_new;
        history.push(loss);
        r = step_residual(model, state, params, f_ext, &a, &free);
        rn = inf_norm(&r);
        if !rn.is_finite() {
            break;
        }
        let halved = rn < 0.5 * best.0;
        if rn < best.0 {
            best = (rn, a.clone());
        }
        // rounding floor: the loss is flat and the residual no longer halves
        stalled = if flat && !halved { stalled + 1 } else { 0 };
        if stalled >= 3 {
            break;
        }
    }
    if best.0 > tol {
        best = (rn, a);
    }

    let converged = best.0 <= tol;
    let (a, x_next, v_next) = finish(state, best.1);
    Ok(StepResult { a, x_next, v_next, residual_norm: best.0, newton_iters: iters, converged, loss_history: history })
}

/// Symplectic Euler with step `dt` (a fraction of the unit step): `v += dt M⁻¹ F(x)`, `x += dt v`.
///
/// Only meant as a small-step reference. It is not stable at large `dt` for stiff cloth.
pub fn step_semi_implicit(
    model: &ClothModel,
    state: &ClothState,
    params: &ClothParams,
    f_ext: &[Vec3],
    dt: f64,
    mode: AnchorMode,
) -> StepResult {
    let free = mode.free_mask(model);
    let f_int = internal_forces(&state.x, params, &model.topology);
    let a: Vec<Vec3> = (0..model.len())
        .map(|k| if free[k] { (f_int[k] + f_ext[k]) / model.masses[k] } else { Vec3::zeros() })
        .collect();
    let v_next: Vec<Vec3> = state.v.iter().zip(&a).map(|(v, a)| v + a * dt).collect();
    let x_next: Vec<Vec3> = state.x.iter().zip(&v_next).map(|(x, v)| x + v * dt).collect();
    StepResult { a, x_next, v_next, residual_norm: 0.0, newton_iters: 0, converged: true, loss_history: Vec::new() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub residual_norm: f64,
    pub newton_iters: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutStatus {
    Complete,
    /// The state became non-finite at this step; the trajectory stops before it.
    NonFinite { step: usize },
}

/// States of a rollout: `states[0]` is the initial state, `states[n]` follows step `n - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub rows: usize,
    pub cols: usize,
    pub states: Vec<ClothState>,
    pub steps: Vec<StepInfo>,
    pub status: RolloutStatus,
}

impl Trajectory {
    pub fn from_states(rows: usize, cols: usize, states: Vec<ClothState>) -> Self {
        Self { rows, cols, states, steps: Vec::new(), status: RolloutStatus::Complete }
    }

    pub fn n_frames(&self) -> usize {
        self.states.len()
    }

    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }

    pub fn is_complete(&self) -> bool {
        self.status == RolloutStatus::Complete
    }
}

/// Runs `n_steps` implicit steps. Step `t` uses the force field's entry `t`.
pub fn rollout(
    model: &ClothModel,
    state0: &ClothState,
    params: &ClothParams,
    forces: &ForceField,
    n_steps: usize,
    mode: AnchorMode,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(state0.clone());
    let mut steps = Vec::with_capacity(n_steps);
    let mut prev_a: Option<Vec<Vec3>> = None;
    for t in 0..n_steps {
        let cur = states.last().expect("non-empty");
        let f = forces.forces(t, &model.masses);
        let res = match step_implicit_from(model, cur, params, &f, mode, cfg, prev_a.as_deref()) {
            Ok(r) => r,
            Err(Error::InvalidArgument(_)) if !cur.is_finite() || !f.iter().all(|v| v.iter().all(|c| c.is_finite())) => {
                return Ok(Trajectory { rows: model.rows, cols: model.cols, states, steps, status: RolloutStatus::NonFinite { step: t } });
            }
            Err(e) => return Err(e),
        };
        let next = ClothState { x: res.x_next, v: res.v_next };
        if !next.is_finite() {
            return Ok(Trajectory { rows: model.rows, cols: model.cols, states, steps, status: RolloutStatus::NonFinite { step: t } });
        }
        steps.push(StepInfo { residual_norm: res.residual_norm, newton_iters: res.newton_iters, converged: res.converged });
        prev_a = Some(res.a);
        states.push(next);
    }
    Ok(Trajectory { rows: model.rows, cols: model.cols, states, steps, status: RolloutStatus::Complete })
}
