//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p clothsft --test acceptance`. Set `ACCEPTANCE_ONLY=name,name` to run a
//! subset. Failures are reported but only change the exit code when `ACCEPTANCE_STRICT=1`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clothsft::check::{gradient_check, GradCheckSpec};
use clothsft::energy::{internal_energy, internal_forces};
use clothsft::eval::{chamfer, chamfer_brute_force};
use clothsft::integrator::{rollout, step_implicit, step_semi_implicit};
use clothsft::sft::{reconstruct, Optimize, SfTConfig, SfTResult, SfTStatus};
use clothsft::synth::{synth_scene, trajectory_chamfer, Gust, SynthScene, SynthSpec};
use clothsft::{AnchorMode, ClothModel, ClothParams, ClothState, ForceField, SolverConfig, Vec3};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn random_params(rng: &mut ChaCha8Rng) -> ClothParams {
    ClothParams::new(log_uniform(rng, 10.0, 1e4), log_uniform(rng, 0.01, 10.0), log_uniform(rng, 1e-3, 10.0))
}

fn random_vec(rng: &mut ChaCha8Rng, a: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a))
}

fn random_pose(model: &ClothModel, rng: &mut ChaCha8Rng, noise: f64) -> Vec<Vec3> {
    model.rest_positions().into_iter().map(|p| p + random_vec(rng, noise)).collect()
}

fn inf_norm(v: &[Vec3]) -> f64 {
    v.iter().flat_map(|p| p.iter().map(|c| c.abs())).fold(0.0, f64::max)
}

fn force_correctness() -> Outcome {
    let model = ClothModel::new(8, 8).unwrap();
    let topo = &model.topology;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let params = random_params(&mut rng);
        let x = random_pose(&model, &mut rng, 0.3);
        let f = internal_forces(&x, &params, topo);
        let h = 1e-6 * (1.0 + inf_norm(&x));
        let mut fd = vec![Vec3::zeros(); x.len()];
        let mut xp = x.clone();
        for k in 0..x.len() {
            for c in 0..3 {
                xp[k][c] = x[k][c] + h;
                let ep = internal_energy(&xp, &params, topo);
                xp[k][c] = x[k][c] - h;
                let em = internal_energy(&xp, &params, topo);
                xp[k][c] = x[k][c];
                fd[k][c] = -(ep - em) / (2.0 * h);
            }
        }
        let diff: Vec<Vec3> = f.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(inf_norm(&diff) / inf_norm(&f).max(1e-300));
    }
    outcome(worst <= 1e-6, format!("max rel err {worst:.2e} over 100 random 8x8 configurations (tol 1e-6)"))
}

fn stationarity() -> Outcome {
    let model = ClothModel::new(8, 8).unwrap();
    let free = AnchorMode::HardAnchors.free_mask(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SolverConfig::default();
    let (mut steps, mut converged, mut worst) = (0, 0, 0.0f64);
    for _ in 0..20 {
        let params = random_params(&mut rng);
        let g = random_vec(&mut rng, 1.0).normalize() * rng.gen_range(0.05..1.0);
        let mut s = ClothState { x: model.rest_positions(), v: vec![Vec3::zeros(); model.len()] };
        for _ in 0..50 {
            let f: Vec<Vec3> = model.masses.iter().map(|m| (g + random_vec(&mut rng, 0.05)) * *m).collect();
            let r = step_implicit(&model, &s, &params, &f, AnchorMode::HardAnchors, &cfg).unwrap();
            steps += 1;
            if r.converged {
                converged += 1;
                let y: Vec<Vec3> = s.x.iter().zip(&s.v).zip(&r.a).map(|((x, v), a)| x + v + a).collect();
                let fi = internal_forces(&y, &params, &model.topology);
                let res: Vec<Vec3> = (0..model.len()).filter(|&k| free[k]).map(|k| r.a[k] * model.masses[k] - fi[k] - f[k]).collect();
                worst = worst.max(inf_norm(&res) / inf_norm(&f).max(1.0));
            }
            s = ClothState { x: r.x_next, v: r.v_next };
        }
    }
    outcome(
        converged == steps && worst <= 1e-6,
        format!("{converged}/{steps} steps converged, max scaled residual {worst:.2e} (tol 1e-6)"),
    )
}

fn rigid_invariance() -> Outcome {
    let model = ClothModel::new(8, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let params = random_params(&mut rng);
        let x = random_pose(&model, &mut rng, 0.3);
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..std::f64::consts::PI));
        let t = random_vec(&mut rng, 100.0);
        let moved: Vec<Vec3> = x.iter().map(|p| rot * p + t).collect();
        let (e0, e1) = (internal_energy(&x, &params, &model.topology), internal_energy(&moved, &params, &model.topology));
        worst = worst.max((e1 - e0).abs() / e0);
    }
    outcome(worst <= 1e-10, format!("max relative energy drift {worst:.2e} over 100 rigid motions (tol 1e-10)"))
}

fn oracle_equivalence() -> Outcome {
    // hanging 16x16 cloth, gravity eased in over 40 frames and held for 10
    let model = ClothModel::new(16, 16).unwrap();
    let params = ClothParams::new(100.0, 8.0, 0.5);
    let g = Vec3::new(0.0, -0.5, 0.0);
    let ease = |t: usize| {
        let s = ((t + 1) as f64 / 40.0).min(1.0);
        s * s * (3.0 - 2.0 * s)
    };
    let ff = ForceField { wind: Vec3::zeros(), turbulence: (0..50).map(|t| vec![g * ease(t); model.len()]).collect() };
    let cfg = SolverConfig { tolerance: 1e-10, ..SolverConfig::default() };
    let tr = rollout(&model, &model.rest_state(), &params, &ff, 50, AnchorMode::HardAnchors, &cfg).unwrap();
    let mut o = model.rest_state();
    for t in 0..50 {
        let f: Vec<Vec3> = model.masses.iter().map(|m| g * ease(t) * *m).collect();
        for _ in 0..1000 {
            let r = step_semi_implicit(&model, &o, &params, &f, 1e-3, AnchorMode::HardAnchors);
            o = ClothState { x: r.x_next, v: r.v_next };
        }
    }
    let end = &tr.states[50].x;
    let rmse = (end.iter().zip(&o.x).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / end.len() as f64).sqrt();
    let sag = end.iter().zip(model.rest_positions()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    outcome(tr.all_converged() && rmse <= 2e-2, format!("endpoint RMSE {rmse:.2e} (tol 2e-2), max displacement {sag:.2}"))
}

fn adjoint_correctness() -> Outcome {
    let r = gradient_check(&GradCheckSpec::default()).unwrap();
    let worst = &r.rows[0];
    outcome(r.max_rel_err <= 1e-3, format!("{} entries on 4x4, 3 frames; max rel err {:.2e} at {} (tol 1e-3)", r.rows.len(), r.max_rel_err, worst.name))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fit(s: &SynthScene, cfg: SfTConfig) -> (SfTResult, f64) {
    let res = reconstruct(&s.scene, cfg).unwrap();
    let c = trajectory_chamfer(&res.trajectory, &s.truth, 4096, 0).unwrap();
    (res, mean(&c))
}

fn parameter_recovery() -> Outcome {
    let s = synth_scene(&SynthSpec::default()).unwrap();
    let (res, c) = fit(&s, SfTConfig::default());
    let y = res.params.stretch;
    let ok = res.status == SfTStatus::Finished && y >= 150.0 && y <= 600.0 && c <= 1e-3;
    outcome(ok, format!("Y {y:.1} (truth 300, init 3000), mean Chamfer {c:.2e} (tol 1e-3), {} cycles in {:.0} s", res.log.len(), res.seconds))
}

fn wind_recovery() -> Outcome {
    let wx = 0.1;
    let s = synth_scene(&SynthSpec { wind: [wx, 0.0, 0.0], ..SynthSpec::default() }).unwrap();
    let (res, c) = fit(&s, SfTConfig::default());
    let w = res.forces.wind.x;
    let rel = (w - wx).abs() / wx;
    outcome(rel <= 0.2, format!("w_x {w:.4} (truth {wx}), rel err {rel:.3} (tol 0.2), Y {:.1}, mean Chamfer {c:.2e}", res.params.stretch))
}

fn small_spec() -> SynthSpec {
    SynthSpec { rows: 8, cols: 8, n_frames: 12, width: 32, height: 32, texture_size: 64, ..SynthSpec::default() }
}

fn stability() -> Outcome {
    let s = synth_scene(&small_spec()).unwrap();
    let mut rec = clothsft::sft::Reconstruction::new(&s.scene, SfTConfig { n_cycles: 10_000, ..SfTConfig::default() }).unwrap();
    let (mut min_c, mut last_c, mut max_ratio) = (f64::INFINITY, 0.0, 0.0f64);
    let mut finite = true;
    let mut bound: f64 = 0.0;
    for k in 0..10_000 {
        let Some(row) = rec.cycle().unwrap() else { break };
        finite &= row.image_loss.is_finite() && row.silhouette_loss.is_finite() && row.regularizer.is_finite();
        if k % 100 == 99 {
            let tr = rec.simulate(s.scene.n_frames()).unwrap();
            bound = bound.max(tr.states.iter().flat_map(|st| st.x.iter().map(|p| p.norm())).fold(0.0, f64::max));
            last_c = mean(&trajectory_chamfer(&tr, &s.truth, 4096, 0).unwrap());
            min_c = min_c.min(last_c);
            max_ratio = max_ratio.max(last_c / min_c);
        }
    }
    let cycles = rec.cycles_done();
    let ok = cycles == 10_000 && !rec.is_aborted() && finite && bound < 1e3 && max_ratio <= 10.0;
    outcome(ok, format!("{cycles} cycles on 8x8/12 frames, losses finite {finite}, max |x| {bound:.1}, Chamfer min {min_c:.2e} final {last_c:.2e}, worst ratio to running min {max_ratio:.2} (tol 10)"))
}

fn ablations() -> Outcome {
    let base = SynthSpec { rows: 16, cols: 16, n_frames: 20, width: 64, height: 64, texture_size: 128, ..SynthSpec::default() };
    let cfg = SfTConfig { n_cycles: 150, ..SfTConfig::default() };

    let gust = Gust { direction: [1.0, 0.0, 0.3], amplitude: 0.08, frequency: 0.4, wavenumber: 0.3 };
    let windy = synth_scene(&SynthSpec { wind: [0.05, 0.0, 0.0], gust: Some(gust), ..base.clone() }).unwrap();
    let (_, with_t) = fit(&windy, cfg.clone());
    let (_, without_t) = fit(&windy, SfTConfig { optimize: Optimize { turbulence: false, ..Optimize::default() }, ..cfg.clone() });
    let t_ok = without_t >= 2.0 * with_t;

    let warped = synth_scene(&SynthSpec { uv_distortion: 0.05, ..base.clone() }).unwrap();
    let (_, with_uv) = fit(&warped, cfg.clone());
    let (_, without_uv) = fit(&warped, SfTConfig { optimize: Optimize { uv: false, ..Optimize::default() }, ..cfg.clone() });
    let uv_ok = without_uv > with_uv;

    let plain = synth_scene(&base).unwrap();
    let all_frames = reconstruct(&plain.scene, SfTConfig { successive: false, n_cycles: 20, ..cfg });
    let schedule_ok = all_frames.as_ref().is_ok_and(|r| r.log.len() == 20 && r.log.iter().all(|l| l.active_frames == 20));

    outcome(
        t_ok && uv_ok && schedule_ok,
        format!(
            "T off {without_t:.2e} vs on {with_t:.2e} (ratio {:.2}, need >= 2); uv off {without_uv:.2e} vs on {with_uv:.2e}; all-frames schedule ran: {schedule_ok}",
            without_t / with_t
        ),
    )
}

fn chamfer_unit() -> Outcome {
    let d = 0.37;
    let two = chamfer(&[Vec3::zeros()], &[Vec3::new(0.0, d, 0.0)]).unwrap();
    let two_err = (two - 2.0 * d * d).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<Vec3> = (0..100).map(|_| random_vec(&mut rng, 1.0)).collect();
    let b: Vec<Vec3> = (0..100).map(|_| random_vec(&mut rng, 1.0)).collect();
    let bf = (chamfer(&a, &b).unwrap() - chamfer_brute_force(&a, &b)).abs();
    outcome(two_err <= 1e-15 && bf <= 1e-12, format!("two-point error {two_err:.1e}, brute-force difference {bf:.1e} (tol 1e-12)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("force_correctness", force_correctness),
        ("implicit_stationarity", stationarity),
        ("rigid_motion_invariance", rigid_invariance),
        ("oracle_equivalence", oracle_equivalence),
        ("adjoint_correctness", adjoint_correctness),
        ("chamfer_unit", chamfer_unit),
        ("stability", stability),
        ("ablation_directions", ablations),
        ("wind_recovery", wind_recovery),
        ("parameter_recovery", parameter_recovery),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(str::to_string).collect());
    let mut failed = 0;
    for (name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        println!("{} {name}: {} [{:.1} s]", if r.pass { "PASS" } else { "FAIL" }, r.detail, t.elapsed().as_secs_f64());
        failed += usize::from(!r.pass);
    }
    println!("{failed} criteria failed");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
