//! Centralized discrete-time LQR baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{all_finite, symmetrize};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    #[serde(with = "crate::linalg::serde_matrix")]
    pub p: DMatrix<f64>,
    /// `K_c = −(BᵀPB + R)⁻¹BᵀPA`.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub r: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DareOptions {
    /// Bound on the Frobenius norm of the final fixed-point step.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Start with structure-preserving doubling before the fixed-point sweep.
    pub doubling: bool,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100_000,
            doubling: true,
        }
    }
}

/// One application of the Riccati map `AᵀPA + Q − AᵀPB(BᵀPB + R)⁻¹BᵀPA`.
pub fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let btpa = b.transpose() * &pa;
    let s = b.transpose() * p * b + r;
    let x = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("BᵀPB + R".into()))?
        .solve(&btpa);
    Ok(symmetrize(&(a.transpose() * &pa + q - btpa.transpose() * x)))
}

/// `‖AᵀPA + Q − AᵀPB(BᵀPB + R)⁻¹BᵀPA − P‖_F`.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    Ok((riccati_map(a, b, q, r, p)? - p).norm())
}

pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = b.transpose() * p * b + r;
    let rhs = b.transpose() * p * a;
    let x = s
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("BᵀPB + R".into()))?;
    Ok(-x)
}

fn check_inputs(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    for (name, mat) in [("A", a), ("B", b), ("Q", q), ("R", r)] {
        if !all_finite(mat) {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if symmetrize(r).cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R".into()));
    }
    Ok(())
}

/// Structure-preserving doubling: `H_k` converges quadratically to `P`.
fn doubling(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let rinv_bt = symmetrize(r).cholesky()?.solve(&b.transpose());
    let mut ak = a.clone();
    let mut gk = symmetrize(&(b * rinv_bt));
    let mut hk = symmetrize(q);
    for _ in 0..60 {
        let w = (&id + &gk * &hk).lu();
        let w_a = w.solve(&ak)?;
        let w_g = w.solve(&gk)?;
        let a_next = &ak * &w_a;
        let g_next = symmetrize(&(&gk + &ak * w_g * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * w_a));
        if !all_finite(&h_next) {
            return None;
        }
        let step = (&h_next - &hk).norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if step <= tol * hk.norm().max(1.0) {
            break;
        }
    }
    Some(hk)
}

/// Solves the discrete algebraic Riccati equation. The fixed-point sweep
/// stops once a step is below `tolerance`; with `doubling` it starts from
/// the doubling solution, otherwise from `Q`.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, options: &DareOptions) -> Result<LqrSolution> {
    check_inputs(a, b, q, r)?;
    let mut p = if options.doubling {
        doubling(a, b, q, r, 1e-15).unwrap_or_else(|| symmetrize(q))
    } else {
        symmetrize(q)
    };
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let next = riccati_map(a, b, q, r, &p)?;
        last_step = (&next - &p).norm();
        p = next;
        iterations += 1;
        if !last_step.is_finite() {
            break;
        }
        if last_step <= options.tolerance {
            break;
        }
    }
    if !(last_step <= options.tolerance) {
        return Err(Error::RiccatiNonConvergence {
            iterations,
            last_step,
        });
    }
    let residual = riccati_residual(a, b, q, r, &p)?;
    let k = lqr_gain(a, b, r, &p)?;
    Ok(LqrSolution {
        p,
        k,
        q: q.clone(),
        r: r.clone(),
        residual,
        iterations,
    })
}

/// [`solve_dare`] with `Q = I`, `R = I` and default options.
pub fn solve_dare_identity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<LqrSolution> {
    let (n, m) = (a.nrows(), b.ncols());
    solve_dare(a, b, &DMatrix::identity(n, n), &DMatrix::identity(m, m), &DareOptions::default())
}
