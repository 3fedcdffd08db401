//! Inverse Kohn-Sham problem on a sinc-DVR lattice: reconstruct the
//! time-dependent scalar potential whose non-interacting evolution reproduces
//! a target density trajectory, plus the reference interacting-system
//! simulator used to produce such trajectories.
//!
//! Module layout follows the pipeline:
//! [`lattice`] (grid + kinetic operator) -> [`state`] (orbitals, densities,
//! traces) -> [`forcebalance`] (the linear map K between potential and
//! density acceleration) -> [`krylov`] (singular-system solvers) ->
//! [`ksinit`] (initial orbital construction and phase assignment) ->
//! [`propagation`] (implicit time stepping and trajectory inversion) ->
//! [`systems`] (reference models and the interacting simulator).
//! [`io`] holds the on-disk trace formats shared with the CLI.

pub mod error;
pub mod forcebalance;
pub mod io;
pub mod krylov;
pub mod ksinit;
pub mod lattice;
pub mod propagation;
pub mod state;
pub mod systems;

pub use error::Error;

#[cfg(test)]
pub(crate) mod testutil;

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
