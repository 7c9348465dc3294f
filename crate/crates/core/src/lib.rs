//! Discrete-velocity numerics for the Boltzmann equation in a half-space slab
//! with a diffuse-reflection wall, coupled to its compressible-fluid limit.
//!
//! The crate provides a hard-sphere collision operator with conservative
//! correction, the linearized operator around local Maxwellians, a slab Euler
//! solver, the interior correction hierarchy, kinetic boundary-layer machinery
//! on a stretched half-line, a direct kinetic slab solver, and a CLI harness
//! that runs epsilon sweeps and emits CSV reports.

pub mod assemble;
pub mod collision;
pub mod error;
pub mod euler;
pub mod grid;
pub mod harness;
pub mod interior;
pub mod knudsen;
pub mod slab;
pub mod util;

pub use error::{Error, Result};
pub use grid::{build_grid, FluidState, MomentWeight, VelocityGrid};
