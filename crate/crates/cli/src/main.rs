use std::fs;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clothsft::check::{gradient_check, GradCheckSpec};
use clothsft::integrator::rollout;
use clothsft::io::{self, load_scene, LoadedScene};
use clothsft::render::Renderer;
use clothsft::sft::{reconstruct_with, SfTStatus};
use clothsft::synth::{synth_scene, trajectory_chamfer, SynthSpec};
use clothsft::{ClothParams, Error, ForceField, Trajectory, Units};
use serde_json::json;

/// Differentiable cloth simulation and shape-from-template reconstruction.
#[derive(Parser, Debug)]
#[command(name = "clothsft", version)]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SceneArgs {
    /// Scene config (TOML).
    #[arg(long, value_name = "PATH")]
    scene: PathBuf,
    /// Override a config value, e.g. `sft.n_cycles=50`. Repeatable.
    #[arg(long = "config-override", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and render a synthetic scene with known parameters.
    Synth {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Synthetic scene description (TOML); built-in defaults otherwise.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        /// Texture seed.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Rest edge length in metres used for the written scene config.
        #[arg(long, value_name = "M", default_value_t = 0.01)]
        edge_length: f64,
        /// Override a spec value, e.g. `params=[300, 8, 0.5]`. Repeatable.
        #[arg(long = "config-override", value_name = "KEY=VALUE", value_parser = parse_override)]
        overrides: Vec<(String, String)>,
    },
    /// Forward rollout with the scene's initial stiffness; writes a trajectory and OBJ frames.
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of frames (default: the video length).
        #[arg(long, value_name = "N")]
        frames: Option<usize>,
    },
    /// Fit stiffness, forces and uv-coordinates to the scene video.
    Reconstruct {
        #[command(flatten)]
        scene: SceneArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of optimisation cycles (default: from the config).
        #[arg(long, value_name = "N")]
        cycles: Option<usize>,
        /// Seed for the Chamfer sampling against the ground truth.
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Per-frame Chamfer distance (x 1e4) between a trajectory and the ground truth.
    Evaluate {
        /// Reconstructed trajectory (.csft).
        #[arg(long, value_name = "PATH")]
        reconstruction: PathBuf,
        /// Ground-truth trajectory (.csft).
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Points sampled per frame and cloud.
        #[arg(long, value_name = "N", default_value_t = 4096)]
        points: usize,
        /// Sampling seed.
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Render every frame of a trajectory with the scene camera and texture.
    RenderPreview {
        #[command(flatten)]
        scene: SceneArgs,
        /// Trajectory to render (.csft).
        #[arg(long, value_name = "PATH")]
        trajectory: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences on a small scene.
    Fdcheck {
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        /// Seed of the random scene.
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    GradientCheck(f64),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl Failure {
    fn report(&self) -> (u8, serde_json::Value) {
        match self {
            Failure::Core(e) => {
                let (code, kind) = match e {
                    Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => (3, "io"),
                    Error::Config(_) | Error::InvalidArgument(_) => (4, "config"),
                    Error::Diverged(_) => (5, "diverged"),
                };
                let mut v = json!({ "error": kind, "message": e.to_string() });
                if let Error::Format { offset, .. } = e {
                    v["offset"] = json!(offset);
                }
                (code, v)
            }
            Failure::GradientCheck(err) => (1, json!({ "error": "gradient_check", "message": format!("max relative error {err:.3e} above tolerance") })),
            Failure::Other(e) => (1, json!({ "error": "other", "message": format!("{e:#}") })),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.render().to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, v) = f.report();
            eprintln!("{v}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { out, spec, seed, edge_length, overrides } => synth(&out, spec.as_deref(), seed, edge_length, &overrides),
        Command::Simulate { scene, out, frames } => simulate(&scene, &out, frames),
        Command::Reconstruct { scene, out, cycles, seed } => reconstruct(&scene, &out, cycles, seed),
        Command::Evaluate { reconstruction, truth, points, seed } => {
            let a = io::read_trajectory(&reconstruction)?;
            let b = io::read_trajectory(&truth)?;
            let c = trajectory_chamfer(&a, &b, points, seed)?;
            print_table(&c);
            Ok(())
        }
        Command::RenderPreview { scene, trajectory, out } => render_preview(&scene, &trajectory, &out),
        Command::Fdcheck { rows, cols, frames, seed, tolerance } => {
            let report = gradient_check(&GradCheckSpec { rows, cols, frames, seed, ..GradCheckSpec::default() })?;
            print!("{report}");
            if report.max_rel_err > tolerance {
                return Err(Failure::GradientCheck(report.max_rel_err));
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn synth(out: &Path, spec: Option<&Path>, seed: Option<u64>, edge_length: f64, overrides: &[(String, String)]) -> Result<(), Failure> {
    let text = match spec {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        io::apply_override(&mut table, k, v)?;
    }
    let mut spec: SynthSpec = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let s = synth_scene(&spec)?;
    // one simulation step per frame; gravity of the normalised scene becomes 9.81 m/s²
    let g = s.scene.gravity.norm();
    let dt = if g > 0.0 { (g * edge_length / 9.81).sqrt() } else { 1.0 / 30.0 };
    let units = Units::new(edge_length, dt)?;
    create_dir(out)?;
    let path = io::write_scene(out, &s.scene, &s.texture, &units, dt, Some(&s.truth))?;
    let truth = json!({
        "stiffness": s.params.as_array(),
        "wind": [s.forces.wind.x, s.forces.wind.y, s.forces.wind.z],
        "spec": toml::to_string(&spec).map_err(|e| anyhow::anyhow!(e))?,
    });
    write_file(&out.join("truth.json"), &serde_json::to_string_pretty(&truth).map_err(anyhow::Error::from)?)?;
    println!("{}", path.display());
    Ok(())
}

fn load(args: &SceneArgs) -> Result<LoadedScene, Failure> {
    Ok(load_scene(&args.scene, &args.overrides)?)
}

fn write_objs(dir: &Path, tr: &Trajectory, uv: &[[f64; 2]], faces: &[[usize; 3]], units: &Units) -> Result<(), Failure> {
    create_dir(dir)?;
    for (f, s) in tr.states.iter().enumerate() {
        let world: Vec<_> = s.x.iter().map(|p| units.denormalize_position(p)).collect();
        io::write_obj(&dir.join(format!("{f:04}.obj")), &world, uv, faces)?;
    }
    Ok(())
}

fn simulate(args: &SceneArgs, out: &Path, frames: Option<usize>) -> Result<(), Failure> {
    let ls = load(args)?;
    let sc = &ls.scene;
    let cfg = &ls.config.sft;
    let frames = frames.unwrap_or(sc.n_frames()).max(1);
    let params = ClothParams::from_array(cfg.stiffness_init);
    let tr = rollout(&sc.model, &sc.initial, &params, &ForceField::constant(sc.gravity), frames - 1, cfg.anchor_mode, &cfg.solver)?;
    if !tr.is_complete() {
        return Err(Error::Diverged(format!("{:?}", tr.status)).into());
    }
    if let Some((k, st)) = tr.steps.iter().enumerate().find(|(_, s)| !s.converged) {
        return Err(Error::Diverged(format!("step {k} did not converge (residual {:.3e})", st.residual_norm)).into());
    }
    create_dir(out)?;
    io::write_trajectory(&out.join("trajectory.csft"), &tr)?;
    write_objs(&out.join("obj"), &tr, &sc.uv, &sc.renderer.faces, &ls.units)?;
    println!("{} frames written to {}", tr.n_frames(), out.display());
    Ok(())
}

fn reconstruct(args: &SceneArgs, out: &Path, cycles: Option<usize>, seed: u64) -> Result<(), Failure> {
    let ls = load(args)?;
    let mut cfg = ls.config.sft.clone();
    if let Some(n) = cycles {
        cfg.n_cycles = n;
    }
    create_dir(out)?;
    let res = reconstruct_with(&ls.scene, cfg, |row| {
        log::info!("cycle {} frames {} L_im {:.4} Y {:.1}", row.cycle, row.active_frames, row.image_loss, row.stretch);
    })?;
    io::write_cycle_log(&out.join("log.csv"), &res.log)?;
    io::write_trajectory(&out.join("trajectory.csft"), &res.trajectory)?;
    write_objs(&out.join("obj"), &res.trajectory, &res.uv, &ls.scene.renderer.faces, &ls.units)?;
    let w = ls.units.denormalize_acceleration(&res.forces.wind);
    let summary = json!({
        "stiffness": res.params.as_array(),
        "wind_normalized": [res.forces.wind.x, res.forces.wind.y, res.forces.wind.z],
        "wind_m_s2": [w.x, w.y, w.z],
        "cycles": res.log.len(),
        "aborted_at": match res.status { SfTStatus::Aborted { cycle } => Some(cycle), SfTStatus::Finished => None },
        "seconds": res.seconds,
    });
    write_file(&out.join("result.json"), &serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?)?;
    println!("{summary}");
    if let Some(truth) = &ls.truth {
        let c = trajectory_chamfer(&res.trajectory, truth, 4096, seed)?;
        print_table(&c);
    }
    if let SfTStatus::Aborted { cycle } = res.status {
        return Err(Error::Diverged(format!("reconstruction stopped at cycle {cycle}")).into());
    }
    Ok(())
}

fn render_preview(args: &SceneArgs, trajectory: &Path, out: &Path) -> Result<(), Failure> {
    let ls = load(args)?;
    let tr = io::read_trajectory(trajectory)?;
    let m = &ls.scene.model;
    if (tr.rows, tr.cols) != (m.rows, m.cols) {
        return Err(Error::Config(format!("trajectory grid {}x{} does not match the scene grid {}x{}", tr.rows, tr.cols, m.rows, m.cols)).into());
    }
    let renderer: &Renderer = &ls.scene.renderer;
    create_dir(out)?;
    for (f, s) in tr.states.iter().enumerate() {
        let o = renderer.render(&s.x, &ls.scene.uv);
        io::save_png(&out.join(format!("{f:04}.png")), &o.rgb)?;
    }
    println!("{} frames written to {}", tr.n_frames(), out.display());
    Ok(())
}

/// Chamfer table, aligned on a terminal and tab-separated otherwise.
fn print_table(chamfer: &[f64]) {
    let mean = chamfer.iter().sum::<f64>() / chamfer.len().max(1) as f64;
    let mut rows: Vec<(String, f64)> = chamfer.iter().enumerate().map(|(f, c)| (f.to_string(), c * 1e4)).collect();
    rows.push(("mean".into(), mean * 1e4));
    let mut out = std::io::stdout().lock();
    if std::io::stdout().is_terminal() {
        let _ = writeln!(out, "{:>6}  {:>14}", "frame", "chamfer_x1e4");
        for (k, v) in rows {
            let _ = writeln!(out, "{k:>6}  {v:>14.4}");
        }
    } else {
        let _ = writeln!(out, "frame\tchamfer_x1e4");
        for (k, v) in rows {
            let _ = writeln!(out, "{k}\t{v:.6}");
        }
    }
}
