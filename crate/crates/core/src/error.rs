use passivnet_conic::SolveError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite entries in {0}")]
    NonFinite(String),

    #[error("subsystem {}: synthesis is infeasible (phase-I margin {margin:.3e})", .subsystem + 1)]
    /// `subsystem` is 0-based; the message is 1-based.
    Infeasible { subsystem: usize, margin: f64 },

    #[error("subsystem {}: solver numerical failure: {reason}", .subsystem + 1)]
    SolverNumerical { subsystem: usize, reason: String },

    #[error("conic solver: {0}")]
    Solver(#[from] SolveError),

    #[error("Riccati iteration did not converge in {iterations} iterations (last step {last_step:.3e})")]
    RiccatiNonConvergence { iterations: usize, last_step: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("closed loop has an eigenvalue at 1; equilibrium is not unique")]
    SingularEquilibrium,

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("baseline tracking error is zero; suboptimality is undefined")]
    ZeroBaseline,

    #[error("cost f^c needs the centralized LQR solution")]
    MissingLqr,

    #[error("schema error at '{path}': {message}")]
    Schema { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
