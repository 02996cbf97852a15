//! Dense primal-dual interior-point solver for block-diagonal linear matrix
//! inequalities.
//!
//! Problems are stated in the inequality ("LMI") form
//!
//! ```text
//! minimize    cᵀy
//! subject to  F₀ᵇ + Σᵢ yᵢ Fᵢᵇ ⪰ 0    for every block b
//! ```
//!
//! with symmetric block data. Scalar inequalities are 1×1 blocks. The solver
//! runs an infeasible-start Mehrotra predictor-corrector on the HKM search
//! direction, and falls back to a phase-I margin problem to tell genuine
//! infeasibility apart from numerical trouble.
//!
//! Problems are assembled with [`AffineMatrix`] expressions whose entries are
//! affine in the decision variables:
//!
//! ```
//! use nalgebra::DMatrix;
//! use passivnet_conic::{ConicSolver, InteriorPointSolver, LmiProblem};
//!
//! // minimize t  s.t.  [[t, 1], [1, t]] ⪰ 0   (optimum t = 1)
//! let mut problem = LmiProblem::new();
//! let t = problem.add_scalar_var();
//! let one = passivnet_conic::AffineMatrix::constant(DMatrix::from_element(1, 1, 1.0));
//! let lmi = passivnet_conic::AffineMatrix::from_blocks(&[
//!     vec![t.clone(), one.clone()],
//!     vec![one, t.clone()],
//! ]).unwrap();
//! problem.add_lmi("margin", &lmi).unwrap();
//! problem.set_objective(&t, 1.0).unwrap();
//! let solution = InteriorPointSolver::default().solve(&problem).unwrap();
//! assert!((solution.objective - 1.0).abs() < 1e-6);
//! ```

mod affine;
mod center;
mod error;
mod ipm;
mod problem;

pub use affine::AffineMatrix;
pub use center::{analytic_center, Center, CenteringSettings};
pub use error::SolveError;
pub use ipm::{InteriorPointSolver, Settings};
pub use problem::{LmiBlock, LmiProblem, Solution};

/// Contract for any backend able to solve an [`LmiProblem`].
///
/// Implementations must be reentrant: one instance may be shared across
/// threads that solve independent problems concurrently.
pub trait ConicSolver: Send + Sync {
    fn solve(&self, problem: &LmiProblem) -> Result<Solution, SolveError>;
}
