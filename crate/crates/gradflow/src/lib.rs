//! Gradient-flow structure of finite-state continuous-time Markov chains.
//!
//! Decides when the law evolution `μ ↦ μ e^{tQ}` of an irreducible chain is a
//! Riemannian gradient flow on the interior of the probability simplex,
//! constructs explicit metric/functional witnesses, and simulates both flows
//! for comparison.
//!
//! Module map:
//! - [`markov_core`]: generator validation, irreducibility, stationary
//!   distribution, semigroup evolution, uniformization.
//! - [`spectral`]: left eigenstructure and the real-diagonalisability verdict.
//! - [`entropy`]: relative entropy, derivative probes, and the
//!   entropy-compatibility checker for candidate functionals.
//! - [`structure`]: equilibrium metric from (Q, d²𝔉), generator recovery,
//!   the canonical gradient structure, detailed balance.
//! - [`flowsim`]: RK4 gradient-flow integration, semigroup comparison, and
//!   the localized metric perturbation.
//! - [`zoo`]: explicit and random chain families used throughout testing.
//! - [`json`]: the chain JSON schema and trajectory CSV export.

pub mod entropy;
pub mod flowsim;
pub mod json;
mod linalg;
pub mod markov_core;
pub mod spectral;
pub mod structure;
pub mod zoo;

pub use markov_core::{Distribution, Generator, StochasticMatrix, TangentVector};
