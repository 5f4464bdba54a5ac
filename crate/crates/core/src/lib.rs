//! Exact-gradient quantum optimal control of the 1D Bose-Hubbard
//! superfluid-to-Mott state transfer, built on a matrix-product-state
//! time-evolution core with an exact-diagonalization oracle for desk-scale
//! verification.
//!
//! Module map:
//! - [`lattice`]: Bloch bands, Wannier functions, and the constitutive
//!   relations J_x(v_x), U(v_x) that turn the dimensionless control u = U/J_x
//!   into lattice depths and SI durations.
//! - [`fock`]: occupation-number-basis exact diagonalization — ground states,
//!   exact and split-step dense propagation, finite-difference gradients.
//! - [`mps`]: matrix product states with canonical gauges, SVD truncation,
//!   overlaps and cross-state matrix elements.
//! - [`tebd`]: the tailored split-step propagator (odd/even bond sweeps with
//!   grouped one-site interaction gates), its adjoint, and imaginary-time
//!   ground-state search.
//! - [`grape`]: cost and exact gradient, regularizers, projected
//!   limited-memory quasi-Newton optimization with step-size homotopy,
//!   seeding, and chain-rule gradients for parametrized controls.
//! - [`observables`]: fidelity, density of defects, rescaled variance, and
//!   the deep-lattice phase-imprint check.
//! - [`runner`]: batch orchestration over durations and seeds with crash-safe
//!   persistence and figure-data emission.

pub mod error;
pub mod fock;
pub mod grape;
pub mod interp;
pub mod lattice;
pub mod mps;
pub mod observables;
pub mod ops;
pub mod runner;
pub mod tebd;

pub use error::{Error, Result};
