//! Photoacoustic tomography with a spherical-mean forward model and
//! per-angle object motion.

pub mod error;
pub mod experiment;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod krylov;
pub mod motion;
pub mod radon;
pub mod sparse;
pub mod theory;
pub mod varpro;

pub use error::{Error, Result};
