//! Sequential (one-thread pool) against parallel (all cores) for the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use clothsft::energy::{assemble_hessian, internal_forces};
use clothsft::integrator::step_implicit;
use clothsft::synth::{synth_scene, SynthSpec};
use clothsft::{AnchorMode, ClothParams, SolverConfig};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = rayon::current_num_threads();
    let mut out = vec![("sequential".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    out.push((format!("parallel-{n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    out
}

fn kernels(c: &mut Criterion) {
    let spec = SynthSpec { n_frames: 8, ..SynthSpec::default() };
    let s = synth_scene(&spec).unwrap();
    let x = s.truth.states.last().unwrap().x.clone();
    let topo = &s.scene.model.topology;
    let params = ClothParams::new(300.0, 8.0, 0.5);

    let mut g = c.benchmark_group("cloth-32x32");
    g.sample_size(20);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("forces", &name), &pool, |b, p| b.iter(|| p.install(|| internal_forces(&x, &params, topo))));
        g.bench_with_input(BenchmarkId::new("hessian", &name), &pool, |b, p| b.iter(|| p.install(|| assemble_hessian(&x, &params, topo))));
        g.bench_with_input(BenchmarkId::new("render-8-frames", &name), &pool, |b, p| {
            b.iter(|| p.install(|| clothsft::par::map(&s.truth.states, |st| s.scene.renderer.render(&st.x, &s.scene.uv).rgb)))
        });
        let f: Vec<_> = s.scene.model.masses.iter().map(|m| s.scene.gravity * *m).collect();
        let state = &s.truth.states[3];
        g.bench_with_input(BenchmarkId::new("implicit-step", &name), &pool, |b, p| {
            b.iter(|| p.install(|| step_implicit(&s.scene.model, state, &params, &f, AnchorMode::HardAnchors, &SolverConfig::default()).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
