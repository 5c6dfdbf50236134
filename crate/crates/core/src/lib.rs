//! Pair-wise 3D deformable registration with a sine-activated coordinate
//! network as the deformation map and a conformal-invariant hyperelastic
//! regulariser, plus the evaluation tooling around it.
//!
//! The pipeline is:
//!
//! 1. [`io`] loads volumes, masks, landmarks and configuration.
//! 2. [`opt::register`] samples points inside the target mask and fits a
//!    [`net::DeformationModel`] by Adam on the objective assembled in [`loss`],
//!    with exact parameter gradients from [`grad`].
//! 3. [`eval`] measures landmark TRE and Jacobian-determinant folding, and
//!    provides closed-form synthetic deformations with known ground truth.
//!
//! The deformation `Φ` maps target (fixed) coordinates into source (moving)
//! coordinates in millimetres, so `I_S(Φ(p)) ≈ I_T(p)` after registration.

pub mod energy;
pub mod error;
pub mod eval;
pub mod grad;
pub mod io;
pub mod loss;
pub mod mat3;
pub mod net;
pub mod opt;
pub mod volume;

mod linalg;
mod trig;

pub use error::{Error, Result};
pub use mat3::Mat3;

/// A point or displacement in world coordinates (mm).
pub type Vec3 = [f64; 3];
