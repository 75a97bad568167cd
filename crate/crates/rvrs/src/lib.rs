//! Variational inference by smoothed rejection sampling.
//!
//! This crate implements a variational family built by running a rejection
//! sampler on top of a tractable proposal. A proposal `q(z)` is paired with
//! a smooth acceptance probability
//!
//! ```text
//! a(z) = sigmoid(log p(z) - log q(z) + T)
//! ```
//!
//! and the distribution actually used for inference is the accepted-sample
//! law `r(z) = q(z) a(z) / Z_r`. Raising the threshold `T` accepts
//! everything and recovers plain variational inference with `q`; lowering it
//! spends proposals to bend `q` toward the target `p`. The evidence lower
//! bound of `r`, its pathwise gradient estimators, the threshold adaptation
//! rule that holds the acceptance rate at a budget, and an amortized variant
//! for models with per-datapoint local variables are all provided, plus
//! quadrature and finite-difference oracles that every estimator is tested
//! against.
//!
//! # Modules
//!
//! * [`proposal`]: reparameterized Gaussian families and the velocity
//!   contraction used by pathwise gradients.
//! * [`target`]: unnormalized differentiable targets, from analytic
//!   Gaussians to hierarchical robust regression.
//! * [`sampler`]: the smoothed rejection sampler and acceptance bookkeeping.
//! * [`gradients`]: single-sample-budget estimators for proposal, model,
//!   and threshold gradients.
//! * [`optimize`]: Adam, the stepped learning-rate schedule, and the
//!   two-phase training loops.
//! * [`semi`]: the amortized local-variable variant with its truncated
//!   sampler and evidence bounds.
//! * [`oracle`]: quadrature, finite differences, and distribution tests
//!   used to validate everything else.
//! * [`config`]: flat key-value run configuration.
//! * [`output`]: trace and summary serialization with full-precision floats.
//! * [`experiments`]: the end-to-end drivers behind the `rvrs` binary.

pub mod config;
pub mod error;
pub mod experiments;
pub mod gradients;
pub mod math;
pub mod optimize;
pub mod oracle;
pub mod output;
pub mod proposal;
pub mod rng;
pub mod sampler;
pub mod semi;
pub mod target;

pub use error::{Error, Result};
