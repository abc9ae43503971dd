//! Time-harmonic acoustic scattering by ensembles of 2D polygonal obstacles.
//!
//! Each distinct shape gets a T-matrix from a Dirichlet-to-Neumann Trefftz
//! discontinuous Galerkin solve ([`tdg`], [`tmatrix`]); copies of a shape are
//! placed by rotating and translating that matrix, and the ensemble is
//! coupled through Graf translation operators and solved with GMRES
//! ([`multiscatt`]).

pub mod cli;
pub mod error;
pub mod geomesh;
pub mod multiscatt;
pub mod oracle;
pub mod specfun;
pub mod tdg;
pub mod tmatrix;
pub mod wavefield;

pub use error::{Error, Result};
pub use num_complex::Complex64 as c64;

/// A point or vector in the plane.
pub type Point = [f64; 2];
