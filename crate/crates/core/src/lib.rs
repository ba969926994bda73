//! Reduced density matrices of a small system coupled to a large environment.
//!
//! The crate builds total Hamiltonians `H = H^S + H^I + H^E` on a tensor-product
//! space, diagonalizes them exactly, and measures how close the system's reduced
//! density matrix in a microcanonical shell is to the uncoupled, Gibbs and
//! renormalized-Gibbs descriptions.
//!
//! Module map:
//!
//! - [`model`]: model specifications, Hamiltonian assembly and reformulation.
//! - [`spectral`]: eigendecompositions, eigenfunction coefficients, densities of states.
//! - [`widths`]: main-body regions of eigenfunctions and LDOS, Breit-Wigner fits.
//! - [`ensemble`]: energy shells, reduced density matrices, Gibbs states and
//!   the diagonal-difference bounds.
//! - [`offdiag`]: the commutator quantity `Q`, ETH statistics and the qubit prediction.
//! - [`renorm`]: renormalization operators and the sufficient-condition metrics.
//! - [`typical`]: typical-state sampling and the overlap decomposition.
//!
//! Every product-space vector uses `(alpha major, i minor)` ordering: row
//! `alpha * d_E + i` holds the amplitude on `|alpha>|i>`, where `alpha` and `i`
//! index the eigenstates of `H^S` and `H^E` in ascending energy order.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ensemble;
mod error;
pub mod linalg;
pub mod model;
pub mod offdiag;
pub mod renorm;
pub mod spectral;
pub mod typical;
pub mod widths;

pub use error::{Error, Result};
pub use faer::c64;
pub use faer::Mat;
