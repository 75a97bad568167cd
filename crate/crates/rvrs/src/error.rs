//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Numerical
//! routines fail loudly on shape mismatches and exhausted budgets instead of
//! silently padding or truncating, and the optimizers attach the last finite
//! state to a divergence error so a run can be inspected post mortem.

use thiserror::Error;

/// Errors produced by proposals, samplers, estimators, optimizers, oracles,
/// and the experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// A `(z, eps)` pair handed to a velocity contraction was not produced by
    /// the proposal's own reparameterization path.
    #[error("inconsistent reparameterization path: max |z - reconstruction| = {max_dev:.3e}")]
    InconsistentPath {
        /// Largest absolute deviation between `z` and the path reconstruction.
        max_dev: f64,
    },

    /// A vector had the wrong length for the requested operation.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim {
        /// Length the operation required.
        expected: usize,
        /// Length it received.
        got: usize,
    },

    /// A model-parameter gradient was requested from a target that has no
    /// learnable model parameters.
    #[error("target has no learnable model parameters")]
    NoTheta,

    /// A datapoint index was out of range.
    #[error("datapoint index {index} out of range for {len} datapoints")]
    Index {
        /// Requested index.
        index: usize,
        /// Number of datapoints.
        len: usize,
    },

    /// The rejection sampler ran out of proposal budget before collecting the
    /// requested number of accepted samples.
    #[error(
        "rejection budget exhausted: {accepted}/{needed} accepted after \
         {proposals_used} proposals (budget {max_proposals})"
    )]
    BudgetExhausted {
        /// Samples accepted before the budget ran out.
        accepted: usize,
        /// Samples that were requested.
        needed: usize,
        /// Proposals consumed.
        proposals_used: u64,
        /// The budget that was exceeded.
        max_proposals: u64,
    },

    /// A covariance-style estimator was given fewer than two samples.
    #[error("batch of {s} samples is too small; the estimator needs at least {min}")]
    BatchTooSmall {
        /// Samples provided.
        s: usize,
        /// Minimum the estimator accepts.
        min: usize,
    },

    /// Flattened parameter and gradient shapes disagree.
    #[error("shape mismatch: expected {expected} parameters, got {got}")]
    Shape {
        /// Length the parameter vector requires.
        expected: usize,
        /// Length that was supplied.
        got: usize,
    },

    /// A computation produced NaN where a finite value was required, for
    /// example an acceptance probability formed from overflowed densities.
    /// The sampler fails fast on this instead of rejecting forever.
    #[error("non-finite {context}: {value}")]
    NonFinite {
        /// What the value was supposed to be.
        context: &'static str,
        /// The offending value.
        value: f64,
    },

    /// Training produced a non-finite value. The last finite optimizer state
    /// is attached for inspection.
    #[error("optimization diverged at iteration {iter}")]
    Diverged {
        /// Iteration at which a non-finite value first appeared.
        iter: u64,
        /// Snapshot from the preceding iteration.
        last_good: Box<LastGoodState>,
    },

    /// Every datapoint in a truncated-sampler batch was masked out, so no
    /// local gradient can be formed.
    #[error("all datapoints masked out; no usable local samples")]
    EmptyMask,

    /// The tail-moment integrand does not vanish at the edge of the
    /// quadrature grid, so the moment is treated as divergent.
    #[error(
        "tail moment integrand does not vanish at the grid edge \
         (edge/peak = {edge_ratio:.3e}); proposal tails are too light"
    )]
    DivergentXi {
        /// Ratio of the largest edge value to the peak of the integrand.
        edge_ratio: f64,
    },

    /// A configuration file could not be parsed or contained invalid keys.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset or checkpoint file could not be parsed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// An underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Snapshot of the most recent finite optimizer state, attached to
/// [`Error::Diverged`].
#[derive(Debug, Clone)]
pub struct LastGoodState {
    /// Flattened proposal parameters.
    pub params: Vec<f64>,
    /// Rejection threshold.
    pub threshold: f64,
    /// Model parameters; empty when the target has none.
    pub theta: Vec<f64>,
    /// Iteration the snapshot was taken at.
    pub iter: u64,
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Checks that a slice has the expected length.
pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dim { expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_len_accepts_match_and_rejects_mismatch() {
        assert!(check_len(3, 3).is_ok());
        match check_len(3, 2) {
            Err(Error::Dim { expected: 3, got: 2 }) => {}
            other => panic!("expected Dim error, got {other:?}"),
        }
    }

    #[test]
    fn errors_render_actionable_messages() {
        let err = Error::BudgetExhausted {
            accepted: 1,
            needed: 2,
            proposals_used: 100,
            max_proposals: 100,
        };
        let msg = err.to_string();
        assert!(msg.contains("1/2"));
        assert!(msg.contains("100"));

        let err = Error::DivergentXi { edge_ratio: 0.5 };
        assert!(err.to_string().contains("edge/peak"));
    }
}
