//! One-dimensional Bohmian mechanics over a computable model of the
//! hyperreals.
//!
//! [`hyperreal`] provides the scalar field, [`wavefield`] the grid and
//! (graded) wavefunctions, [`evolve`] Schrödinger evolution, [`perturb`] the
//! full-support perturbation, and [`dynamics`] particle trajectories.

pub mod dynamics;
pub mod error;
pub mod evolve;
pub mod hyperreal;
pub mod perturb;
pub mod wavefield;

pub use error::Error;
pub use hyperreal::{Exponent, HyperReal, Magnitude};

pub type Result<T, E = Error> = std::result::Result<T, E>;
