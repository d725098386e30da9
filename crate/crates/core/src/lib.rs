//! Spectral Galerkin laboratory for damped wave and Klein-Gordon operators
//! on the circle and the flat 2-torus.
//!
//! The truncated operators are dense complex matrices in the Fourier basis.
//! Everything downstream (spectra, resolvent scans, semigroups, averaged
//! energy inequalities, coherent-state experiments) works on those matrices.

pub mod coherent;
pub mod damping;
pub mod error;
pub mod estimates;
pub mod evolution;
pub mod experiments;
pub mod geometry;
pub mod linalg;
pub mod operators;
pub mod pool;
pub mod spectra;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, C64};
