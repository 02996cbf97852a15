use nalgebra::{DMatrix, SymmetricEigen};

use crate::{AffineMatrix, SolveError};

/// One symmetric block `F₀ + Σᵢ yᵢ Fᵢ ⪰ 0`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub label: String,
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (var, coeff) in &self.terms {
            out += coeff * y[*var];
        }
        out
    }
}

/// `minimize cᵀy + offset` subject to a list of LMI blocks.
#[derive(Debug, Clone, Default)]
pub struct LmiProblem {
    num_vars: usize,
    objective: Vec<f64>,
    objective_offset: f64,
    blocks: Vec<LmiBlock>,
}

/// Primal point returned by a solver along with its quality measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: Vec<f64>,
    /// `cᵀy + offset` at the returned point.
    pub objective: f64,
    pub iterations: usize,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub relative_gap: f64,
    /// Smallest eigenvalue over all blocks evaluated at `y`.
    pub min_eigenvalue: f64,
    /// Set when only the relaxed equality tolerance was met.
    pub reduced_accuracy: bool,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn blocks(&self) -> &[LmiBlock] {
        &self.blocks
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn objective_offset(&self) -> f64 {
        self.objective_offset
    }

    fn new_var(&mut self) -> usize {
        self.num_vars += 1;
        self.objective.push(0.0);
        self.num_vars - 1
    }

    pub fn add_scalar_var(&mut self) -> AffineMatrix {
        let v = self.new_var();
        AffineMatrix::from_term(v, DMatrix::from_element(1, 1, 1.0))
    }

    /// A dense `rows × cols` matrix of independent variables.
    pub fn add_matrix_var(&mut self, rows: usize, cols: usize) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                let v = self.new_var();
                let mut e = DMatrix::zeros(rows, cols);
                e[(i, j)] = 1.0;
                out = out + AffineMatrix::from_term(v, e);
            }
        }
        out
    }

    /// A symmetric `n × n` matrix variable with `n(n+1)/2` free entries.
    pub fn add_symmetric_var(&mut self, n: usize) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.new_var();
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                out = out + AffineMatrix::from_term(v, e);
            }
        }
        out
    }

    /// A diagonal `n × n` matrix variable.
    pub fn add_diagonal_var(&mut self, n: usize) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(n, n);
        for i in 0..n {
            let v = self.new_var();
            let mut e = DMatrix::zeros(n, n);
            e[(i, i)] = 1.0;
            out = out + AffineMatrix::from_term(v, e);
        }
        out
    }

    /// Adds the constraint `expr ⪰ 0`. The expression must be square and
    /// symmetric up to rounding; it is stored symmetrized.
    pub fn add_lmi(&mut self, label: &str, expr: &AffineMatrix) -> Result<(), SolveError> {
        let (r, c) = expr.shape();
        if r != c || r == 0 {
            return Err(SolveError::InvalidProblem(format!(
                "constraint '{label}' is {r}×{c}, expected a non-empty square matrix"
            )));
        }
        let scale = expr
            .terms()
            .values()
            .map(|m| m.amax())
            .fold(expr.constant_part().amax(), f64::max)
            .max(1.0);
        if expr.asymmetry() > 1e-10 * scale {
            return Err(SolveError::InvalidProblem(format!(
                "constraint '{label}' is not symmetric"
            )));
        }
        if let Some(v) = expr.max_var() {
            if v >= self.num_vars {
                return Err(SolveError::InvalidProblem(format!(
                    "constraint '{label}' references unknown variable {v}"
                )));
            }
        }
        let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
        self.blocks.push(LmiBlock {
            label: label.to_string(),
            constant: sym(expr.constant_part()),
            terms: expr
                .terms()
                .iter()
                .filter(|(_, m)| m.iter().any(|x| *x != 0.0))
                .map(|(&v, m)| (v, sym(m)))
                .collect(),
        });
        Ok(())
    }

    /// Adds `weight · expr` to the objective; `expr` must be 1×1.
    pub fn set_objective(&mut self, expr: &AffineMatrix, weight: f64) -> Result<(), SolveError> {
        if expr.shape() != (1, 1) {
            return Err(SolveError::InvalidProblem(
                "objective expression must be scalar".into(),
            ));
        }
        self.objective_offset += weight * expr.constant_part()[(0, 0)];
        for (&v, m) in expr.terms() {
            if v >= self.num_vars {
                return Err(SolveError::InvalidProblem(format!(
                    "objective references unknown variable {v}"
                )));
            }
            self.objective[v] += weight * m[(0, 0)];
        }
        Ok(())
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective_offset
            + self
                .objective
                .iter()
                .zip(y)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }

    /// Minimum eigenvalue of each block at `y`, in block order.
    pub fn block_min_eigenvalues(&self, y: &[f64]) -> Vec<(String, f64)> {
        self.blocks
            .iter()
            .map(|b| (b.label.clone(), min_eigenvalue(&b.evaluate(y))))
            .collect()
    }

    pub fn min_eigenvalue(&self, y: &[f64]) -> f64 {
        self.block_min_eigenvalues(y)
            .into_iter()
            .map(|(_, v)| v)
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}
