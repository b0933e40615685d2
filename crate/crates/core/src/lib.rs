//! Matrix-variate statistics for auditing private covariance estimators.
//!
//! The crate is organised bottom-up:
//!
//! * [`sym`]: symmetric matrices, half-vectorisation, the duplication
//!   matrix, symmetric gradients and finite-difference divergences.
//! * [`dist`]: Gaussian, Wishart, normalised Wishart and inverse Wishart
//!   samplers, densities, moments and tail bounds.
//! * [`score`]: the Gaussian score with respect to the covariance and the
//!   Fisher information over the `vech` parametrisation.
//! * [`mechanism`]: reference covariance estimators behind one interface,
//!   plus error measurement against the Wishart prior.
//! * [`harness`]: the score-attack correlation statistic and the
//!   Monte Carlo experiments built on it.
//! * [`verify`]: Monte Carlo cross-checks of the moment identities and
//!   tail bounds used by the harness.
//!
//! All randomness flows through [`rng::RngStream`], so every estimate is a
//! pure function of its inputs and a `(master_seed, stream_index)` pair.

pub mod dist;
pub mod error;
pub mod harness;
pub mod mc;
pub mod mechanism;
pub mod rng;
pub mod score;
pub mod sym;
pub mod verify;

pub use error::{Error, Result};
pub use mc::McEstimate;
pub use rng::RngStream;
pub use sym::{HalfVec, SymMatrix, WellConditionedSet};
