//! Robustness analysis for discrete-time Markov jump linear systems (MJLS)
//! whose jump parameter is a Markov chain on either a finite set or a real
//! interval (a Borel state space with a transition density kernel).
//!
//! The toolkit computes H-infinity norms of the input-to-output operator,
//! derives stability-radius lower bounds from them, certifies robust
//! exponential mean-square stability against norm-bounded uncertainty by
//! solving linear-matrix-inequality (LMI) feasibility problems — including a
//! gridding reduction that turns the interval-chain (infinite-dimensional)
//! case into finitely many LMIs — and validates certificates both by
//! independent inequality re-evaluation and by Monte Carlo simulation.
//!
//! Module layout:
//! - [`matfun`]: dense symmetric-matrix numerics — eigenvalue margins, Schur
//!   complements, matrix exponentials and exponential integrals.
//! - [`markov`]: finite and kernel-on-interval chain models — density
//!   evolution, positivity checks, sampling, subinterval masses.
//! - [`mjls`]: the MJLS model container, its operator algebra, trajectory
//!   simulation, the mean-square spectral-radius test, and feedback
//!   interconnections.
//! - [`gridding`]: interval partitioning, per-cell deviation bounds, the
//!   square-root mass row, and the finite-to-interval lift.
//! - [`lmi`]: LMI assembly, the semidefinite feasibility backend, H-infinity
//!   bisection, robust-stability certification, and certificate verification.
//! - [`ncs`]: the networked-control application — exact discretization of a
//!   sampled-data loop with Markov transmission delays into an uncertain MJLS.

pub mod error;
pub mod gridding;
pub mod lmi;
pub mod markov;
pub mod matfun;
pub mod mjls;
pub mod ncs;

pub use error::Error;
