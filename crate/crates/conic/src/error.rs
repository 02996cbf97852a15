use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolveError {
    /// The constraints admit no point. `margin` is the smallest uniform
    /// shift `t` such that every block plus `t·I` can be made PSD; it is
    /// strictly positive for an infeasible problem.
    #[error("problem is infeasible (phase-I margin {margin:.3e} after {iterations} iterations)")]
    Infeasible { margin: f64, iterations: usize },

    /// The objective decreases without bound over the feasible set.
    #[error("objective is unbounded below: {0}")]
    Unbounded(String),

    /// The iteration failed for numerical reasons. Rescaling the data
    /// (see [`crate::Settings::equilibrate`]) may help.
    #[error("numerical failure after {iterations} iterations: {reason}")]
    NumericalFailure { reason: String, iterations: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}
