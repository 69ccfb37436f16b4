//! Bloch-spectral analysis of the linearized Schrödinger–Poisson–Newton
//! crystal on the cubic lattice.

pub mod assembly;
pub mod basis;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod fiber;
pub mod grid;
pub mod ion_sector;
pub mod linalg;
pub mod rank_one;
pub mod report;
pub mod resolvent;
pub mod spectral;
pub mod sweep;

pub use error::{Error, Result};
pub use num_complex::Complex64 as c64;
