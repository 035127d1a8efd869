//! File formats: trajectory binary, OBJ meshes, PNG images, TOML scene configs and CSV logs.
//!
//! Trajectory layout, all little-endian:
//!
//! ```text
//! "CSFT1"  n_frames:u32  rows:u32  cols:u32  reserved:u32 (= 0)
//! positions  n_frames × rows × cols × 3 f64
//! velocities n_frames × rows × cols × 3 f64
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::cloth::{ClothModel, ClothState, Units, Vec3};
use crate::integrator::Trajectory;
use crate::render::{grid_uv, Camera, Image, Renderer, Texture};
use crate::sft::{CycleLog, SfTConfig, Scene};
use crate::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 5] = b"CSFT1";
pub const TRAJECTORY_HEADER: usize = 21;

pub fn trajectory_to_bytes(t: &Trajectory) -> Result<Vec<u8>> {
    if t.states.is_empty() {
        return Err(Error::invalid("cannot write an empty trajectory"));
    }
    let n = t.rows * t.cols;
    if t.states.iter().any(|s| s.x.len() != n || s.v.len() != n) {
        return Err(Error::invalid("state sizes do not match the grid"));
    }
    let mut out = Vec::with_capacity(TRAJECTORY_HEADER + t.states.len() * n * 48);
    out.extend_from_slice(TRAJECTORY_MAGIC);
    for v in [t.states.len(), t.rows, t.cols, 0] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("trajectory too large"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for field in [0, 1] {
        for s in &t.states {
            for p in if field == 0 { &s.x } else { &s.v } {
                for c in p.iter() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn trajectory_from_bytes(b: &[u8]) -> Result<Trajectory> {
    let fmt = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if b.len() < TRAJECTORY_HEADER {
        return Err(fmt(b.len(), format!("truncated header ({} of {TRAJECTORY_HEADER} bytes)", b.len())));
    }
    if &b[..5] != TRAJECTORY_MAGIC {
        return Err(fmt(0, "bad magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(b[5 + 4 * k..9 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (frames, rows, cols, reserved) = (word(0), word(1), word(2), word(3));
    if reserved != 0 {
        return Err(fmt(17, format!("reserved word is {reserved}, expected 0")));
    }
    if frames == 0 {
        return Err(fmt(5, "trajectory has no frames".into()));
    }
    if rows < 2 || cols < 2 {
        return Err(fmt(9, format!("grid {rows}x{cols} is smaller than 2x2")));
    }
    let n = rows * cols;
    let expect = frames.checked_mul(n).and_then(|v| v.checked_mul(48)).and_then(|v| v.checked_add(TRAJECTORY_HEADER));
    match expect {
        Some(e) if e == b.len() => {}
        Some(e) if e > b.len() => return Err(fmt(b.len(), format!("truncated: expected {e} bytes"))),
        Some(e) => return Err(fmt(e, format!("{} trailing bytes", b.len() - e))),
        None => return Err(fmt(5, "sizes overflow".into())),
    }
    let f64_at = |off: usize| f64::from_le_bytes(b[off..off + 8].try_into().expect("8 bytes"));
    let block = |start: usize, frame: usize| -> Vec<Vec3> {
        (0..n).map(|k| {
            let off = start + (frame * n + k) * 24;
            Vec3::new(f64_at(off), f64_at(off + 8), f64_at(off + 16))
        })
        .collect()
    };
    let vel_start = TRAJECTORY_HEADER + frames * n * 24;
    let states = (0..frames).map(|f| ClothState { x: block(TRAJECTORY_HEADER, f), v: block(vel_start, f) }).collect();
    Ok(Trajectory::from_states(rows, cols, states))
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    fs::write(path, trajectory_to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Wavefront OBJ with one `vt` per vertex.
pub fn obj_string(positions: &[Vec3], uv: &[[f64; 2]], faces: &[[usize; 3]]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    for p in positions {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for t in uv {
        let _ = writeln!(s, "vt {} {}", t[0], t[1]);
    }
    for f in faces {
        let [a, b, c] = f.map(|k| k + 1);
        let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
    }
    s
}

pub fn write_obj(path: &Path, positions: &[Vec3], uv: &[[f64; 2]], faces: &[[usize; 3]]) -> Result<()> {
    fs::write(path, obj_string(positions, uv, faces)).map_err(|e| Error::io(path, e))
}

/// Parsed OBJ: positions, texture coordinates and triangles (vertex indices, zero-based).
pub type ObjMesh = (Vec<Vec3>, Vec<[f64; 2]>, Vec<[usize; 3]>);

pub fn parse_obj(text: &str) -> Result<ObjMesh> {
    let mut pos = Vec::new();
    let mut uv = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let err = |m: String| Error::Format { offset, message: m };
        let mut it = line.split_whitespace();
        let nums = |it: std::str::SplitWhitespace, k: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = it.map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| err(format!("{e} in {line:?}")))?;
            if v.len() < k {
                return Err(err(format!("expected {k} numbers in {line:?}")));
            }
            Ok(v)
        };
        match it.next() {
            Some("v") => {
                let v = nums(it, 3)?;
                pos.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("vt") => {
                let v = nums(it, 2)?;
                uv.push([v[0], v[1]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(format!("{e} in {line:?}")))?;
                if idx.len() != 3 || idx.iter().any(|&k| k == 0) {
                    return Err(err(format!("only triangles with 1-based indices are supported: {line:?}")));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
        offset += line.len() as u64 + 1;
    }
    if faces.iter().flatten().any(|&k| k >= pos.len()) {
        return Err(Error::Format { offset, message: "face index out of range".into() });
    }
    Ok((pos, uv, faces))
}

pub fn read_obj(path: &Path) -> Result<ObjMesh> {
    parse_obj(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(Error::invalid(format!("cannot save {c}-channel image"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Image { path: path.into(), message: e.to_string() }),
        None => Err(Error::invalid("image buffer size mismatch")),
    }
}

/// Reads an 8-bit PNG as `channels` (1 or 3) channels in `[0, 1]`.
pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.into(), message: other.to_string() },
    })?;
    use image::DynamicImage as D;
    if !matches!(dynimg, D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgb8(_) | D::ImageRgba8(_)) {
        return Err(Error::Format { offset: 0, message: format!("{}: unsupported pixel format {:?}, expected 8 bits per channel", path.display(), dynimg.color()) });
    }
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f64> = match channels {
        1 => dynimg.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => dynimg.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        c => return Err(Error::invalid(format!("cannot load {c}-channel image"))),
    };
    Ok(Image { width: w, height: h, channels, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub rows: usize,
    pub cols: usize,
    /// Rest edge length in metres.
    pub edge_length: f64,
    /// OBJ with the cloth shape in the first frame, in metres. The flat rest grid when absent.
    #[serde(default)]
    pub initial: Option<String>,
}

/// Pinhole camera in world units; `rotation` (row-major) and `translation` map world to camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraConfig {
    pub fn from_camera(c: &Camera) -> Self {
        let r = c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Camera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, r, Vec3::from(self.translation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoConfig {
    pub n_frames: usize,
    /// Path pattern with `{}` standing for the zero-padded 4-digit frame index.
    pub frames: String,
    #[serde(default)]
    pub masks: Option<String>,
    pub texture: String,
    /// Seconds between frames.
    pub frame_interval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub template: TemplateConfig,
    pub camera: CameraConfig,
    pub video: VideoConfig,
    /// Gravity in m/s².
    pub gravity: [f64; 3],
    #[serde(default)]
    pub sft: SfTConfig,
    /// Optional ground-truth trajectory (normalised units) for evaluation.
    #[serde(default)]
    pub truth: Option<String>,
}

impl SceneConfig {
    pub fn units(&self) -> Result<Units> {
        Units::new(self.template.edge_length, self.video.frame_interval / self.sft.steps_per_frame.max(1) as f64)
    }

    /// The gravity as a normalised acceleration.
    pub fn normalized_gravity(&self) -> Result<Vec3> {
        Ok(self.units()?.normalize_acceleration(&Vec3::from(self.gravity)))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.template;
        if t.rows < 2 || t.cols < 2 {
            return Err(Error::Config(format!("template must be at least 2x2, got {}x{}", t.rows, t.cols)));
        }
        if !(t.edge_length > 0.0 && self.video.frame_interval > 0.0) {
            return Err(Error::Config("edge_length and frame_interval must be positive".into()));
        }
        if self.video.n_frames == 0 {
            return Err(Error::Config("video has no frames".into()));
        }
        if !self.video.frames.contains("{}") || self.video.masks.as_ref().is_some_and(|m| !m.contains("{}")) {
            return Err(Error::Config("frame and mask patterns need a {} placeholder".into()));
        }
        self.camera.to_camera().map_err(|e| Error::Config(e.to_string()))?;
        self.sft.validate()?;
        Ok(())
    }
}

pub fn frame_path(pattern: &str, index: usize) -> String {
    pattern.replacen("{}", &format!("{index:04}"), 1)
}

/// Sets `key` (dotted path) to `value`, parsed as a TOML value when possible and as a string
/// otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses a scene config with `KEY=VALUE` overrides applied first.
pub fn parse_scene_config(text: &str, overrides: &[(String, String)]) -> Result<SceneConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let cfg: SceneConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn scene_config_to_string(cfg: &SceneConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// A scene loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub config: SceneConfig,
    pub units: Units,
    pub scene: Scene,
    pub truth: Option<Trajectory>,
    pub dir: PathBuf,
}

pub fn load_scene(path: &Path, overrides: &[(String, String)]) -> Result<LoadedScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = parse_scene_config(&text, overrides)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let units = config.units()?;
    let t = &config.template;
    let model = ClothModel::new(t.rows, t.cols)?;
    let camera = config.camera.to_camera()?.normalized(&units);
    let texture = Texture::new(load_png(&dir.join(&config.video.texture), 3)?)?;
    let frames = (0..config.video.n_frames).map(|k| load_png(&dir.join(frame_path(&config.video.frames, k)), 3)).collect::<Result<Vec<_>>>()?;
    let masks = match &config.video.masks {
        Some(p) => Some((0..config.video.n_frames).map(|k| load_png(&dir.join(frame_path(p, k)), 1)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let truth = match &config.truth {
        Some(p) => Some(read_trajectory(&dir.join(p))?),
        None => None,
    };
    let mut initial = model.rest_state();
    if let Some(p) = &t.initial {
        let (pos, _, _) = read_obj(&dir.join(p))?;
        if pos.len() != model.len() {
            return Err(Error::Config(format!("{p}: {} vertices, expected {}", pos.len(), model.len())));
        }
        initial.x = pos.iter().map(|q| units.normalize_position(q)).collect();
    }
    let scene = Scene {
        initial,
        renderer: Renderer::for_grid(t.rows, t.cols, camera, texture),
        uv: grid_uv(t.rows, t.cols),
        frames,
        masks,
        gravity: config.normalized_gravity()?,
        model,
    };
    scene.validate()?;
    Ok(LoadedScene { config, units, scene, truth, dir })
}

/// Writes frames, masks, texture, truth and `scene.toml` for an in-memory scene into `dir`.
pub fn write_scene(dir: &Path, scene: &Scene, texture: &Texture, units: &Units, frame_interval: f64, truth: Option<&Trajectory>) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    for (k, f) in scene.frames.iter().enumerate() {
        save_png(&dir.join(frame_path("frames/{}.png", k)), f)?;
    }
    if let Some(masks) = &scene.masks {
        for (k, m) in masks.iter().enumerate() {
            save_png(&dir.join(frame_path("masks/{}.png", k)), m)?;
        }
    }
    save_png(&dir.join("texture.png"), texture.image())?;
    if let Some(t) = truth {
        write_trajectory(&dir.join("truth.csft"), t)?;
    }
    let world: Vec<Vec3> = scene.initial.x.iter().map(|p| units.denormalize_position(p)).collect();
    write_obj(&dir.join("initial.obj"), &world, &scene.uv, &scene.renderer.faces)?;
    let mut cam = scene.renderer.camera.clone();
    cam.translation *= units.space_scale;
    let g = units.denormalize_acceleration(&scene.gravity);
    let config = SceneConfig {
        template: TemplateConfig { rows: scene.model.rows, cols: scene.model.cols, edge_length: units.space_scale, initial: Some("initial.obj".into()) },
        camera: CameraConfig::from_camera(&cam),
        video: VideoConfig { n_frames: scene.frames.len(), frames: "frames/{}.png".into(), masks: scene.masks.as_ref().map(|_| "masks/{}.png".into()), texture: "texture.png".into(), frame_interval },
        gravity: [g.x, g.y, g.z],
        sft: SfTConfig::default(),
        truth: truth.map(|_| "truth.csft".into()),
    };
    let path = dir.join("scene.toml");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(scene_config_to_string(&config)?.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Serialize)]
struct LogRow {
    cycle: usize,
    active_frames: usize,
    #[serde(rename = "L_im")]
    image: f64,
    #[serde(rename = "L_sil")]
    silhouette: f64,
    #[serde(rename = "R_T")]
    reg: f64,
    #[serde(rename = "Y")]
    y: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "B")]
    b: f64,
    wind_norm: f64,
    max_turbulence: f64,
    seconds: f64,
}

/// Per-cycle CSV log.
pub fn write_cycle_log(path: &Path, rows: &[CycleLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        let row = LogRow {
            cycle: r.cycle,
            active_frames: r.active_frames,
            image: r.image_loss,
            silhouette: r.silhouette_loss,
            reg: r.regularizer,
            y: r.stretch,
            s: r.shear,
            b: r.bend,
            wind_norm: r.wind_norm,
            max_turbulence: r.max_turbulence,
            seconds: r.seconds,
        };
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
