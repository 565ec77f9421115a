//! Diffeomorphic deformable registration of 3D volumes.
//!
//! The crate covers the full pipeline of a multimodal instance-optimization
//! registration engine:
//!
//! - [`volume`]: grids, trilinear sampling, warping and resolution pyramids.
//! - [`transform`]: stationary velocity fields, scaling-and-squaring,
//!   composition, Jacobians and the non-diffeomorphic volume (NDV).
//! - [`similarity`]: local NCC, the MIND descriptor, correlation volumes and
//!   vector-field attention.
//! - [`regularize`]: diffusion and group-consistency penalties and the
//!   weighted total loss.
//! - [`optimizer`]: coarse-to-fine optimization of pairs and triplets.
//! - [`augment`]: PCHIP intensity remapping curves and LUT banks.
//! - [`metrics`]: Dice, HD95 and TRE.
//! - [`io`] and [`cli`]: NIfTI-1 subset, LUT/landmark/config files and the
//!   `regkit` command line.
//!
//! Displacements are stored in millimetres; `φ(x) = x + d(x)` maps a fixed
//! voxel to the moving image, so a warped moving image is `M(x + d(x))`.

pub mod augment;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod regularize;
pub mod similarity;
pub mod synth;
pub mod transform;
pub mod volume;

pub use error::{RegError, Result};
pub use transform::{DisplacementField, VelocityField};
pub use volume::{GridSpec, LabelMap, LandmarkSet, Volume};
