use nalgebra::{DMatrix, DVector};

use crate::{LmiProblem, SolveError};

/// Stopping rule for [`analytic_center`].
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringSettings {
    /// Stop once the squared Newton decrement falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CenteringSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub y: Vec<f64>,
    pub iterations: usize,
    /// Squared Newton decrement at `y`.
    pub decrement: f64,
}

/// `−Σ log det F_b(y)`, or `None` outside the interior.
fn barrier(problem: &LmiProblem, y: &[f64]) -> Option<f64> {
    let mut value = 0.0;
    for b in problem.blocks() {
        let chol = b.evaluate(y).cholesky()?;
        value -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    value.is_finite().then_some(value)
}

fn gradient_hessian(problem: &LmiProblem, y: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = problem.num_vars();
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    for b in problem.blocks() {
        let inv = b.evaluate(y).cholesky()?.inverse();
        let scaled: Vec<(usize, DMatrix<f64>)> = b.terms.iter().map(|(v, f)| (*v, &inv * f)).collect();
        for (p, (vi, si)) in scaled.iter().enumerate() {
            g[*vi] -= si.trace();
            for (vk, sk) in &scaled[p..] {
                let t = si.component_mul(&sk.transpose()).sum();
                h[(*vi, *vk)] += t;
                if vi != vk {
                    h[(*vk, *vi)] += t;
                }
            }
        }
    }
    Some((g, h))
}

/// Minimizer of the log-det barrier over the interior of the feasible set,
/// by damped Newton steps from a strictly feasible `start`.
pub fn analytic_center(problem: &LmiProblem, start: &[f64], settings: &CenteringSettings) -> Result<Center, SolveError> {
    let mut y = start.to_vec();
    let mut value = barrier(problem, &y)
        .ok_or_else(|| SolveError::InvalidProblem("centering needs a strictly feasible start".into()))?;
    let mut decrement = f64::INFINITY;
    for iteration in 0..settings.max_iterations {
        let (g, h) = gradient_hessian(problem, &y).expect("interior point");
        let step = h.clone().cholesky().map(|c| -c.solve(&g)).ok_or_else(|| SolveError::NumericalFailure {
            reason: "barrier Hessian is singular; the feasible set may be unbounded".into(),
            iterations: iteration,
        })?;
        decrement = -g.dot(&step);
        if decrement <= settings.tolerance {
            return Ok(Center { y, iterations: iteration, decrement });
        }
        let mut t = if decrement > 0.0625 { 1.0 / (1.0 + decrement.sqrt()) } else { 1.0 };
        loop {
            let trial: Vec<f64> = y.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            match barrier(problem, &trial) {
                Some(v) if v <= value - 0.25 * t * decrement => {
                    y = trial;
                    value = v;
                    break;
                }
                _ if t < 1e-12 => {
                    return Ok(Center { y, iterations: iteration, decrement });
                }
                _ => t *= 0.5,
            }
        }
    }
    Ok(Center {
        y,
        iterations: settings.max_iterations,
        decrement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::AffineMatrix;

    fn scalar(v: f64) -> AffineMatrix {
        AffineMatrix::constant(DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn interval_center_is_midpoint() {
        // 0 ≤ t ≤ 4
        let mut p = LmiProblem::new();
        let t = p.add_scalar_var();
        p.add_lmi("lo", &t).unwrap();
        p.add_lmi("hi", &(scalar(4.0) - t)).unwrap();
        let c = analytic_center(&p, &[0.3], &CenteringSettings::default()).unwrap();
        assert!((c.y[0] - 2.0).abs() < 1e-9, "{:?}", c);
    }

    #[test]
    fn matrix_block_center_matches_closed_form() {
        // [[1, t], [t, 1]] ⪰ 0 and t ≤ 1/2: maximize (1 − t²)(1/2 − t);
        // the stationary point solves 3t² − t − 1 = 0.
        let mut p = LmiProblem::new();
        let t = p.add_scalar_var();
        let one = scalar(1.0);
        let m = AffineMatrix::from_blocks(&[vec![one.clone(), t.clone()], vec![t.clone(), one]]).unwrap();
        p.add_lmi("m", &m).unwrap();
        p.add_lmi("cap", &(scalar(0.5) - t)).unwrap();
        let oracle = (1.0 - 13f64.sqrt()) / 6.0;
        let c = analytic_center(&p, &[0.0], &CenteringSettings::default()).unwrap();
        assert!((c.y[0] - oracle).abs() < 1e-9, "{} vs {oracle}", c.y[0]);
    }

    #[test]
    fn rejects_infeasible_start() {
        let mut p = LmiProblem::new();
        let t = p.add_scalar_var();
        p.add_lmi("lo", &t).unwrap();
        assert!(analytic_center(&p, &[-1.0], &CenteringSettings::default()).is_err());
    }

    #[test]
    fn unbounded_set_reports_failure() {
        let mut p = LmiProblem::new();
        let t = p.add_scalar_var();
        let _free = p.add_scalar_var();
        p.add_lmi("lo", &t).unwrap();
        assert!(analytic_center(&p, &[1.0, 0.0], &CenteringSettings::default()).is_err());
    }
}
