//! Grid cloth template, state and parameter types.
//!
//! Vertices are stored row-major: vertex `(i, j)` lives at index `i * cols + j`. Row 0 is the top
//! of the cloth and the two top corners are the default anchors.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::energy::Topology;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Stretch, shear and bend stiffness shared by every edge and angle of the cloth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClothParams {
    pub stretch: f64,
    pub shear: f64,
    pub bend: f64,
}

impl ClothParams {
    /// Smallest values the reconstruction optimizer may produce.
    pub const MIN: ClothParams = ClothParams { stretch: 10.0, shear: 0.01, bend: 1e-5 };

    pub fn new(stretch: f64, shear: f64, bend: f64) -> Self {
        Self { stretch, shear, bend }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.stretch, self.shear, self.bend]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

impl Default for ClothParams {
    fn default() -> Self {
        Self::new(3000.0, 8.0, 0.5)
    }
}

/// Space and time scales mapping world units to normalized simulation units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    /// World length of one normalized unit (the rest edge length).
    pub space_scale: f64,
    /// World duration of one simulation step.
    pub time_scale: f64,
}

impl Units {
    pub fn new(space_scale: f64, time_scale: f64) -> Result<Self> {
        if !(space_scale > 0.0 && space_scale.is_finite()) || !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "unit scales must be positive, got space {space_scale}, time {time_scale}"
            )));
        }
        Ok(Self { space_scale, time_scale })
    }

    pub fn normalize_position(&self, p: &Vec3) -> Vec3 {
        p / self.space_scale
    }

    pub fn denormalize_position(&self, p: &Vec3) -> Vec3 {
        p * self.space_scale
    }

    pub fn normalize_velocity(&self, v: &Vec3) -> Vec3 {
        v * (self.time_scale / self.space_scale)
    }

    pub fn denormalize_velocity(&self, v: &Vec3) -> Vec3 {
        v * (self.space_scale / self.time_scale)
    }

    /// World acceleration (e.g. gravity in m/s²) to normalized units per step².
    pub fn normalize_acceleration(&self, a: &Vec3) -> Vec3 {
        a * (self.time_scale * self.time_scale / self.space_scale)
    }

    pub fn denormalize_acceleration(&self, a: &Vec3) -> Vec3 {
        a * (self.space_scale / (self.time_scale * self.time_scale))
    }
}

/// Normalizes world positions and velocities. Fails on non-positive scales.
pub fn normalize_state(world_x: &[Vec3], world_v: &[Vec3], units: &Units) -> Result<ClothState> {
    Units::new(units.space_scale, units.time_scale)?;
    Ok(ClothState {
        x: world_x.iter().map(|p| units.normalize_position(p)).collect(),
        v: world_v.iter().map(|v| units.normalize_velocity(v)).collect(),
    })
}

/// Inverse of [`normalize_state`].
pub fn denormalize_state(state: &ClothState, units: &Units) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    Units::new(units.space_scale, units.time_scale)?;
    Ok((
        state.x.iter().map(|p| units.denormalize_position(p)).collect(),
        state.v.iter().map(|v| units.denormalize_velocity(v)).collect(),
    ))
}

/// Positions and velocities of every vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

impl ClothState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.v.iter()).all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// The static part of a grid cloth: dimensions, masses, anchors and connectivity.
#[derive(Clone, Debug)]
pub struct ClothModel {
    pub rows: usize,
    pub cols: usize,
    pub masses: Vec<f64>,
    pub anchors: Vec<bool>,
    pub topology: Topology,
}

impl ClothModel {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::invalid(format!("grid must be at least 2x2, got {rows}x{cols}")));
        }
        let n = rows * cols;
        let mut masses = vec![1.0; n];
        for i in 0..rows {
            for j in 0..cols {
                let border_i = i == 0 || i == rows - 1;
                let border_j = j == 0 || j == cols - 1;
                masses[i * cols + j] = match (border_i, border_j) {
                    (true, true) => 0.25,
                    (true, false) | (false, true) => 0.5,
                    (false, false) => 1.0,
                };
            }
        }
        let mut anchors = vec![false; n];
        anchors[0] = true;
        anchors[cols - 1] = true;
        Ok(Self { rows, cols, masses, anchors, topology: Topology::grid(rows, cols) })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Flat rest pose in the x-y plane: vertex `(i, j)` sits at `(j, -i, 0)`.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| Vec3::new(j as f64, -(i as f64), 0.0)))
            .collect()
    }

    pub fn rest_state(&self) -> ClothState {
        ClothState { x: self.rest_positions(), v: vec![Vec3::zeros(); self.len()] }
    }

    pub fn anchor_indices(&self) -> Vec<usize> {
        self.anchors.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }
}

/// Template plus current state.
#[derive(Clone, Debug)]
pub struct GridCloth {
    pub model: ClothModel,
    pub state: ClothState,
}

/// Builds the flat template grid with unit edges, zero velocity and the two top corners anchored.
pub fn build_template(rows: usize, cols: usize, world_edge_length: f64) -> Result<(GridCloth, Units)> {
    if !(world_edge_length > 0.0 && world_edge_length.is_finite()) {
        return Err(Error::invalid(format!("edge length must be positive, got {world_edge_length}")));
    }
    let model = ClothModel::new(rows, cols)?;
    let state = model.rest_state();
    Ok((GridCloth { model, state }, Units { space_scale: world_edge_length, time_scale: 1.0 }))
}

/// External forcing as a per-unit-mass field: a constant part plus a turbulent part per step.
///
/// The force on vertex `k` during step `t` is `m_k * (wind + turbulence[t][k])`. Missing
/// turbulence entries count as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    pub wind: Vec3,
    pub turbulence: Vec<Vec<Vec3>>,
}

impl ForceField {
    pub fn constant(wind: Vec3) -> Self {
        Self { wind, turbulence: Vec::new() }
    }

    pub fn with_turbulence(wind: Vec3, steps: usize, vertices: usize) -> Self {
        Self { wind, turbulence: vec![vec![Vec3::zeros(); vertices]; steps] }
    }

    /// Acceleration field at `step`.
    pub fn acceleration(&self, step: usize, vertex: usize) -> Vec3 {
        match self.turbulence.get(step) {
            Some(t) => self.wind + t[vertex],
            None => self.wind,
        }
    }

    /// Per-vertex forces at `step`.
    pub fn forces(&self, step: usize, masses: &[f64]) -> Vec<Vec3> {
        masses.iter().enumerate().map(|(k, &m)| self.acceleration(step, k) * m).collect()
    }
}
