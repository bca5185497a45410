//! Data-driven correction of a k-omega SST RANS model.
//!
//! A per-cell multiplier on the omega production term is recovered from
//! reference velocities by adjoint-based field inversion, then learned from
//! local non-dimensional flow features by an ensemble of Gaussian process
//! emulators whose predictive variance decides, cell by cell, whether the
//! learned correction is applied.

pub mod ensemble;
pub mod error;
pub mod features;
pub mod inversion;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod novelty;
pub mod optim;
pub mod solver;

pub use error::{Error, Result};
pub use mesh::{BoundaryTag, Mesh};
pub use solver::{
    solve_rans, BoundaryConditions, Case, CorrectionField, FlowState, SolverSettings,
    TurbulenceModel,
};
