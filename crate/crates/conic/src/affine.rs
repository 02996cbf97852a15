use std::collections::BTreeMap;
use std::ops::{Add, Neg, Sub};

use nalgebra::DMatrix;

use crate::SolveError;

/// A matrix whose entries are affine functions of the decision vector `y`:
/// `constant + Σᵢ yᵢ·coeffs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn constant(value: DMatrix<f64>) -> Self {
        Self {
            constant: value,
            terms: BTreeMap::new(),
        }
    }

    /// `coeff · y[var]`.
    pub fn from_term(var: usize, coeff: DMatrix<f64>) -> Self {
        let mut terms = BTreeMap::new();
        let rows = coeff.nrows();
        let cols = coeff.ncols();
        terms.insert(var, coeff);
        Self {
            constant: DMatrix::zeros(rows, cols),
            terms,
        }
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    /// Variable coefficients, keyed by variable index.
    pub fn terms(&self) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.terms
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }

    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (&var, coeff) in &self.terms {
            out += coeff * y[var];
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            constant: &self.constant * factor,
            terms: self
                .terms
                .iter()
                .map(|(&v, m)| (v, m * factor))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|(&v, m)| (v, m.transpose()))
                .collect(),
        }
    }

    /// `lhs · self`.
    pub fn left_mul(&self, lhs: &DMatrix<f64>) -> Self {
        assert_eq!(lhs.ncols(), self.nrows(), "left_mul: dimension mismatch");
        Self {
            constant: lhs * &self.constant,
            terms: self.terms.iter().map(|(&v, m)| (v, lhs * m)).collect(),
        }
    }

    /// `self · rhs`.
    pub fn right_mul(&self, rhs: &DMatrix<f64>) -> Self {
        assert_eq!(self.ncols(), rhs.nrows(), "right_mul: dimension mismatch");
        Self {
            constant: &self.constant * rhs,
            terms: self.terms.iter().map(|(&v, m)| (v, m * rhs)).collect(),
        }
    }

    /// The 1×1 expression at `(row, col)`.
    pub fn entry(&self, row: usize, col: usize) -> Self {
        self.submatrix(row, col, 1, 1)
    }

    pub fn submatrix(&self, row: usize, col: usize, nrows: usize, ncols: usize) -> Self {
        Self {
            constant: self.constant.view((row, col), (nrows, ncols)).into_owned(),
            terms: self
                .terms
                .iter()
                .map(|(&v, m)| (v, m.view((row, col), (nrows, ncols)).into_owned()))
                .filter(|(_, m)| m.iter().any(|x| *x != 0.0))
                .collect(),
        }
    }

    /// Column vector of the entries in column-major order.
    pub fn vectorize(&self) -> Self {
        let len = self.nrows() * self.ncols();
        let flat = |m: &DMatrix<f64>| DMatrix::from_column_slice(len, 1, m.as_slice());
        Self {
            constant: flat(&self.constant),
            terms: self.terms.iter().map(|(&v, m)| (v, flat(m))).collect(),
        }
    }

    /// Stacks a grid of expressions into one matrix. Every row of the grid
    /// must share a row count and every column a column count.
    pub fn from_blocks(grid: &[Vec<AffineMatrix>]) -> Result<Self, SolveError> {
        if grid.is_empty() || grid[0].is_empty() {
            return Err(SolveError::InvalidProblem("empty block grid".into()));
        }
        let ncols_grid = grid[0].len();
        let mut row_sizes = Vec::with_capacity(grid.len());
        for (bi, row) in grid.iter().enumerate() {
            if row.len() != ncols_grid {
                return Err(SolveError::InvalidProblem(format!(
                    "block row {bi} has {} blocks, expected {ncols_grid}",
                    row.len()
                )));
            }
            row_sizes.push(row[0].nrows());
        }
        let col_sizes: Vec<usize> = grid[0].iter().map(|b| b.ncols()).collect();
        for (bi, row) in grid.iter().enumerate() {
            for (bj, block) in row.iter().enumerate() {
                if block.shape() != (row_sizes[bi], col_sizes[bj]) {
                    return Err(SolveError::InvalidProblem(format!(
                        "block ({bi},{bj}) is {:?}, expected {:?}",
                        block.shape(),
                        (row_sizes[bi], col_sizes[bj])
                    )));
                }
            }
        }
        let total_rows: usize = row_sizes.iter().sum();
        let total_cols: usize = col_sizes.iter().sum();
        let mut out = Self::zeros(total_rows, total_cols);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, block) in row.iter().enumerate() {
                out.place(r0, c0, block);
                c0 += col_sizes[bj];
            }
            r0 += row_sizes[bi];
        }
        Ok(out)
    }

    /// Block-diagonal stacking.
    pub fn block_diagonal(parts: &[AffineMatrix]) -> Self {
        let rows: usize = parts.iter().map(|p| p.nrows()).sum();
        let cols: usize = parts.iter().map(|p| p.ncols()).sum();
        let mut out = Self::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for p in parts {
            out.place(r0, c0, p);
            r0 += p.nrows();
            c0 += p.ncols();
        }
        out
    }

    fn place(&mut self, r0: usize, c0: usize, block: &AffineMatrix) {
        let (r, c) = block.shape();
        self.constant
            .view_mut((r0, c0), (r, c))
            .copy_from(&block.constant);
        for (&v, m) in &block.terms {
            let (rows, cols) = self.shape();
            let target = self
                .terms
                .entry(v)
                .or_insert_with(|| DMatrix::zeros(rows, cols));
            target.view_mut((r0, c0), (r, c)).copy_from(m);
        }
    }

    /// Largest absolute asymmetry over the constant and all coefficients.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows() != self.ncols() {
            return f64::INFINITY;
        }
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax();
        self.terms
            .values()
            .map(asym)
            .fold(asym(&self.constant), f64::max)
    }

    fn combine(&self, other: &Self, sign: f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "affine shape mismatch");
        let mut out = self.clone();
        out.constant += &other.constant * sign;
        for (&v, m) in &other.terms {
            match out.terms.get_mut(&v) {
                Some(existing) => *existing += m * sign,
                None => {
                    out.terms.insert(v, m * sign);
                }
            }
        }
        out
    }
}

impl Add for &AffineMatrix {
    type Output = AffineMatrix;
    fn add(self, rhs: &AffineMatrix) -> AffineMatrix {
        self.combine(rhs, 1.0)
    }
}

impl Sub for &AffineMatrix {
    type Output = AffineMatrix;
    fn sub(self, rhs: &AffineMatrix) -> AffineMatrix {
        self.combine(rhs, -1.0)
    }
}

impl Add for AffineMatrix {
    type Output = AffineMatrix;
    fn add(self, rhs: AffineMatrix) -> AffineMatrix {
        self.combine(&rhs, 1.0)
    }
}

impl Sub for AffineMatrix {
    type Output = AffineMatrix;
    fn sub(self, rhs: AffineMatrix) -> AffineMatrix {
        self.combine(&rhs, -1.0)
    }
}

impl Neg for &AffineMatrix {
    type Output = AffineMatrix;
    fn neg(self) -> AffineMatrix {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_combines_terms() {
        let x = AffineMatrix::from_term(0, DMatrix::identity(2, 2));
        let y = AffineMatrix::from_term(1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let c = AffineMatrix::constant(DMatrix::from_element(2, 2, 0.5));
        let expr = &(&x + &y) - &c;
        let value = expr.evaluate(&[2.0, 3.0]);
        assert_eq!(value, DMatrix::from_row_slice(2, 2, &[1.5, 2.5, 2.5, 1.5]));
    }

    #[test]
    fn from_blocks_checks_shapes() {
        let a = AffineMatrix::zeros(2, 2);
        let b = AffineMatrix::zeros(1, 2);
        let err = AffineMatrix::from_blocks(&[vec![a.clone(), a.clone()], vec![b.clone(), a]]);
        assert!(err.is_err());
        let ok = AffineMatrix::from_blocks(&[vec![b.clone()], vec![b]]).unwrap();
        assert_eq!(ok.shape(), (2, 2));
    }

    #[test]
    fn products_and_transpose() {
        let x = AffineMatrix::from_term(0, DMatrix::from_row_slice(2, 1, &[1.0, 2.0]));
        let l = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let v = x.left_mul(&l).evaluate(&[2.0]);
        assert_eq!(v[(0, 0)], 22.0);
        assert_eq!(x.transpose().shape(), (1, 2));
        assert_eq!(x.vectorize().shape(), (2, 1));
    }
}
