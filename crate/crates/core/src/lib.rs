//! Differentiable grid-cloth simulation and shape-from-template reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! * [`cloth`] holds the grid template, state, stiffness parameters, force field and unit conventions.
//! * [`energy`] evaluates stretch/shear/bend energies, forces and Hessians.
//! * [`integrator`] advances the cloth with the implicit (backward Euler) step, solved as a
//!   minimisation of the per-step physics loss, and a small-step semi-implicit reference.
//! * [`diff`] back-propagates trajectory losses to stiffness, forces and the initial state, and
//!   provides Adam with parameter groups.
//! * [`render`] rasterises the cloth with a pinhole camera into RGB and soft silhouettes, with
//!   gradients for positions and uv-coordinates.
//! * [`sft`] is the reconstruction loop.
//! * [`eval`], [`io`] and [`synth`] cover metrics, file formats and synthetic scenes.
//!
//! All simulation quantities live in normalized units: interior vertex mass 1, rest edge length 1
//! and one time step per unit of time.

pub mod check;
pub mod cloth;
pub mod diff;
pub mod dual;
pub mod energy;
mod error;
pub mod eval;
pub mod integrator;
pub mod io;
pub mod par;
pub mod render;
pub mod sft;
pub mod sparse;
pub mod synth;

pub use cloth::{build_template, ClothModel, ClothParams, ClothState, ForceField, GridCloth, Units, Vec3};
pub use error::{Error, Result};
pub use integrator::{AnchorMode, SolverConfig, StepResult, Trajectory};
