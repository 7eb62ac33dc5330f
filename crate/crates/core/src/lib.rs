//! Recovered finite element methods (R-FEM) for second-order elliptic and
//! convection–diffusion problems on 2D triangular meshes.

pub mod adapt;
pub mod bench;
pub mod checks;
pub mod error;
pub mod estimator;
pub mod fespace;
pub mod forms;
pub mod mesh;
pub mod quadrature;
pub mod recovery;
pub mod sparse;
pub mod system;

pub use error::{Error, Result};
