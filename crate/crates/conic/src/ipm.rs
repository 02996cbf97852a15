use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::problem::min_eigenvalue;
use crate::{ConicSolver, LmiProblem, Solution, SolveError};

/// Tuning knobs for [`InteriorPointSolver`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// Target for relative gap, primal and dual infeasibility.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    /// Rescale variables and blocks to unit coefficient norms before solving.
    pub equilibrate: bool,
    /// Phase-I margins above this value (relative to the data scale)
    /// classify the problem as infeasible.
    pub infeasibility_threshold: f64,
    /// When the full tolerance is out of reach, an iterate whose gap and
    /// constraint residual meet `tolerance` and whose equality residual
    /// meets this looser bound is returned with `reduced_accuracy` set.
    pub relaxed_tolerance: f64,
    /// Stop after this many iterations without improving the best iterate.
    pub stall_iterations: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 120,
            step_fraction: 0.98,
            equilibrate: false,
            infeasibility_threshold: 1e-8,
            relaxed_tolerance: 1e-5,
            stall_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPointSolver {
    pub settings: Settings,
}

impl InteriorPointSolver {
    pub fn new(settings: Settings) -> Self {
        Self { settings }
    }
}

impl ConicSolver for InteriorPointSolver {
    fn solve(&self, problem: &LmiProblem) -> Result<Solution, SolveError> {
        let data = Data::from_problem(problem, self.settings.equilibrate)?;
        let (reason, iterations) = match run(&data, &self.settings, None) {
            Outcome::Converged(state) => return Ok(finish(problem, &data, state)),
            Outcome::Failed {
                reason,
                iterations,
                state,
            } => {
                if state.dual_objective(&data) < -1e12 {
                    return Err(SolveError::Unbounded(reason));
                }
                (reason, iterations)
            }
        };
        let (margin, interior, phase_iters) = phase_one_margin(problem, &self.settings, &reason, iterations)?;
        if margin > self.settings.infeasibility_threshold * margin_scale(problem, &interior.1) {
            return Err(SolveError::Infeasible {
                margin,
                iterations: iterations + phase_iters,
            });
        }
        if margin < 0.0 {
            // Restart from the strictly feasible phase-I point.
            let start = data.scale_in(&interior.0);
            match run(&data, &self.settings, Some(start)) {
                Outcome::Converged(state) => return Ok(finish(problem, &data, state)),
                Outcome::Failed { reason: warm, .. } => {
                    return Err(SolveError::NumericalFailure {
                        reason: format!("{reason}; restart from a phase-I interior point: {warm}; phase I reports margin {margin:.3e}"),
                        iterations: iterations + phase_iters,
                    })
                }
            }
        }
        Err(SolveError::NumericalFailure {
            reason: format!("{reason}; phase I reports margin {margin:.3e}"),
            iterations: iterations + phase_iters,
        })
    }
}

/// Scale of the phase-I margin: only blocks carrying weight in the phase-I
/// dual certificate count.
fn margin_scale(problem: &LmiProblem, weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    1.0 + problem
        .blocks()
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w >= 1e-6 * total)
        .map(|(b, _)| b.constant.amax())
        .fold(0.0, f64::max)
}

/// Solves the phase-I margin problem after phase II failed to converge.
/// Returns the margin, the phase-I point of the original variables with the
/// trace of every dual block, and the iteration count.
#[allow(clippy::type_complexity)]
fn phase_one_margin(
    problem: &LmiProblem,
    settings: &Settings,
    reason: &str,
    iterations: usize,
) -> Result<(f64, (Vec<f64>, Vec<f64>), usize), SolveError> {
    let margin_problem = phase_one(problem)?;
    let data = Data::from_problem(&margin_problem, settings.equilibrate)?;
    match run(&data, settings, None) {
        Outcome::Converged(state) => {
            let mut y = data.unscale(&state.y);
            let margin = y.pop().expect("phase-I problem has a margin variable");
            let weights: Vec<f64> = state.x.iter().map(|x| x.trace()).collect();
            Ok((margin, (y, weights), state.iterations))
        }
        Outcome::Failed {
            reason: phase_reason,
            iterations: phase_iters,
            ..
        } => Err(SolveError::NumericalFailure {
            reason: format!("{reason}; phase I also failed: {phase_reason}"),
            iterations: iterations + phase_iters,
        }),
    }
}

/// `minimize t` s.t. every block `+ t·I ⪰ 0`, `t ≥ -1`.
fn phase_one(problem: &LmiProblem) -> Result<LmiProblem, SolveError> {
    let mut out = LmiProblem::new();
    let vars: Vec<_> = (0..problem.num_vars())
        .map(|_| out.add_scalar_var())
        .collect();
    let t = out.add_scalar_var();
    for block in problem.blocks() {
        let d = block.dim();
        let mut expr = crate::AffineMatrix::constant(block.constant.clone());
        for (v, coeff) in &block.terms {
            let var = vars[*v].terms().keys().next().copied().unwrap();
            expr = expr + crate::AffineMatrix::from_term(var, coeff.clone());
        }
        let tv = t.terms().keys().next().copied().unwrap();
        expr = expr + crate::AffineMatrix::from_term(tv, DMatrix::identity(d, d));
        out.add_lmi(&block.label, &expr)?;
    }
    let floor = &t + &crate::AffineMatrix::constant(DMatrix::from_element(1, 1, 1.0));
    out.add_lmi("margin floor", &floor)?;
    out.set_objective(&t, 1.0)?;
    Ok(out)
}

/// Problem data restricted to variables that appear in some block, with
/// optional equilibration applied.
struct Data {
    blocks: Vec<BlockData>,
    c: DVector<f64>,
    /// Original index of each active variable.
    active: Vec<usize>,
    /// Scale such that `y_original = var_scale * y_internal`.
    var_scale: Vec<f64>,
    num_original: usize,
}

struct BlockData {
    f0: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl Data {
    fn from_problem(problem: &LmiProblem, equilibrate: bool) -> Result<Self, SolveError> {
        let n = problem.num_vars();
        let mut col_norm = vec![0.0_f64; n];
        for block in problem.blocks() {
            for (v, m) in &block.terms {
                col_norm[*v] += m.norm_squared();
            }
        }
        let mut index = vec![usize::MAX; n];
        let mut active = Vec::new();
        for v in 0..n {
            if col_norm[v] > 0.0 {
                index[v] = active.len();
                active.push(v);
            } else if problem.objective()[v] != 0.0 {
                return Err(SolveError::Unbounded(format!(
                    "variable {v} has a nonzero cost but appears in no constraint"
                )));
            }
        }
        let var_scale: Vec<f64> = active
            .iter()
            .map(|&v| {
                if equilibrate {
                    1.0 / col_norm[v].sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut blocks = Vec::with_capacity(problem.blocks().len());
        for block in problem.blocks() {
            let coeffs: Vec<(usize, DMatrix<f64>)> = block
                .terms
                .iter()
                .map(|(v, m)| (index[*v], m * var_scale[index[*v]]))
                .collect();
            let mut f0 = block.constant.clone();
            let mut coeffs = coeffs;
            if equilibrate {
                let s = coeffs
                    .iter()
                    .map(|(_, m)| m.norm())
                    .fold(f0.norm(), f64::max);
                if s > 0.0 {
                    f0 /= s;
                    for (_, m) in coeffs.iter_mut() {
                        *m /= s;
                    }
                }
            }
            blocks.push(BlockData { f0, coeffs });
        }
        let c = DVector::from_iterator(
            active.len(),
            active
                .iter()
                .enumerate()
                .map(|(k, &v)| problem.objective()[v] * var_scale[k]),
        );
        Ok(Self {
            blocks,
            c,
            active,
            var_scale,
            num_original: n,
        })
    }

    fn unscale(&self, y: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.num_original];
        for (k, &v) in self.active.iter().enumerate() {
            out[v] = y[k] * self.var_scale[k];
        }
        out
    }

    fn scale_in(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.active.len(),
            self.active.iter().enumerate().map(|(k, &v)| y[v] / self.var_scale[k]),
        )
    }

    fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.f0.nrows()).sum()
    }
}

#[derive(Clone)]
struct State {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    y: DVector<f64>,
    iterations: usize,
    relative_gap: f64,
    primal_infeasibility: f64,
    dual_infeasibility: f64,
    reduced_accuracy: bool,
}

impl State {
    fn dual_objective(&self, data: &Data) -> f64 {
        data.c.dot(&self.y)
    }
}

enum Outcome {
    Converged(State),
    Failed {
        reason: String,
        iterations: usize,
        state: State,
    },
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `Z = F(y)` and the perfectly centred `X = μZ⁻¹`.
fn interior_state(data: &Data, y: DVector<f64>) -> Option<State> {
    let mu = (1.0 + data.c.dot(&y).abs()) / data.total_dim() as f64;
    let mut x = Vec::with_capacity(data.blocks.len());
    let mut z = Vec::with_capacity(data.blocks.len());
    for block in &data.blocks {
        let mut f = block.f0.clone();
        for (v, m) in &block.coeffs {
            f += m * y[*v];
        }
        let f = sym(f);
        x.push(inverse_spd(&f)? * mu);
        z.push(f);
    }
    Some(State {
        x,
        z,
        y,
        iterations: 0,
        relative_gap: f64::INFINITY,
        primal_infeasibility: f64::INFINITY,
        dual_infeasibility: f64::INFINITY,
        reduced_accuracy: false,
    })
}

fn initial_state(data: &Data) -> State {
    let c_max = data.c.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut x = Vec::new();
    let mut z = Vec::new();
    for b in &data.blocks {
        let d = b.f0.nrows();
        let sd = (d as f64).sqrt();
        let coeff_max = b.coeffs.iter().map(|(_, m)| m.norm()).fold(0.0, f64::max);
        let xi = (10.0_f64).max(sd).max(sd * (1.0 + c_max) / (1.0 + coeff_max));
        let eta = (10.0_f64).max(sd).max(b.f0.norm()).max(coeff_max);
        x.push(DMatrix::identity(d, d) * xi);
        z.push(DMatrix::identity(d, d) * eta);
    }
    State {
        x,
        z,
        y: DVector::zeros(data.c.len()),
        iterations: 0,
        relative_gap: f64::INFINITY,
        primal_infeasibility: f64::INFINITY,
        dual_infeasibility: f64::INFINITY,
        reduced_accuracy: false,
    }
}

/// Largest `α` with `X + α·dX ⪰ 0`; infinite if `dX ⪰ 0`.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    if x.nrows() == 1 {
        return if dx[(0, 0)] < 0.0 {
            -x[(0, 0)] / dx[(0, 0)]
        } else {
            f64::INFINITY
        };
    }
    let Some(chol) = Cholesky::new(x.clone()) else {
        return 0.0;
    };
    let l = chol.l();
    let Some(a) = l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(w) = l.solve_lower_triangular(&a.transpose()) else {
        return 0.0;
    };
    let lambda = SymmetricEigen::new(sym(w)).eigenvalues.min();
    if lambda >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lambda
    }
}

fn inverse_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 1 {
        return (m[(0, 0)] > 0.0).then(|| DMatrix::from_element(1, 1, 1.0 / m[(0, 0)]));
    }
    Cholesky::new(m.clone()).map(|c| sym(c.inverse()))
}

fn solve_schur(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Some(chol.solve(rhs));
    }
    let diag_max = m.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut reg = diag_max.max(1e-300) * 1e-14;
    for _ in 0..8 {
        let shifted = m + DMatrix::identity(m.nrows(), m.nrows()) * reg;
        if let Some(chol) = Cholesky::new(shifted) {
            return Some(chol.solve(rhs));
        }
        reg *= 100.0;
    }
    m.clone().lu().solve(rhs)
}

fn run(data: &Data, settings: &Settings, start: Option<DVector<f64>>) -> Outcome {
    let mut best = None;
    match iterate(data, settings, &mut best, start) {
        Outcome::Failed {
            reason,
            iterations,
            state,
        } => match best {
            Some(mut b)
                if b.relative_gap <= settings.tolerance
                    && b.dual_infeasibility <= settings.tolerance
                    && b.primal_infeasibility <= settings.relaxed_tolerance =>
            {
                b.reduced_accuracy = true;
                Outcome::Converged(b)
            }
            _ => Outcome::Failed {
                reason,
                iterations,
                state,
            },
        },
        done => done,
    }
}

fn merit(st: &State) -> f64 {
    st.relative_gap
        .max(st.primal_infeasibility)
        .max(st.dual_infeasibility)
}

fn iterate(data: &Data, settings: &Settings, best: &mut Option<State>, start: Option<DVector<f64>>) -> Outcome {
    let nvars = data.c.len();
    let total_dim = data.total_dim() as f64;
    let mut st = match start {
        Some(y) => match interior_state(data, y) {
            Some(st) => st,
            None => {
                return Outcome::Failed {
                    reason: "starting point is not interior".into(),
                    iterations: 0,
                    state: initial_state(data),
                }
            }
        },
        None => initial_state(data),
    };
    let c_norm = data.c.norm();
    let mut stalled = 0;

    for iter in 0..=settings.max_iterations {
        st.iterations = iter;
        // residuals
        let mut rp = data.c.clone();
        let mut rd = Vec::with_capacity(data.blocks.len());
        let mut pobj = 0.0;
        let mut gap = 0.0;
        for (b, block) in data.blocks.iter().enumerate() {
            let mut f = block.f0.clone();
            for (v, m) in &block.coeffs {
                rp[*v] -= frob(m, &st.x[b]);
                f += m * st.y[*v];
            }
            pobj -= frob(&block.f0, &st.x[b]);
            gap += frob(&st.x[b], &st.z[b]);
            rd.push(f - &st.z[b]);
        }
        let dobj = data.c.dot(&st.y);
        st.primal_infeasibility = rp.norm() / (1.0 + c_norm);
        st.dual_infeasibility = rd
            .iter()
            .zip(&data.blocks)
            .map(|(r, block)| r.norm() / (1.0 + block.f0.norm()))
            .fold(0.0, f64::max);
        st.relative_gap = gap / (1.0 + pobj.abs() + dobj.abs());

        if !(gap.is_finite() && pobj.is_finite() && dobj.is_finite()) {
            return Outcome::Failed {
                reason: "non-finite iterate".into(),
                iterations: iter,
                state: st,
            };
        }
        if st.relative_gap <= settings.tolerance
            && st.primal_infeasibility <= settings.tolerance
            && st.dual_infeasibility <= settings.tolerance
        {
            return Outcome::Converged(st);
        }
        if best.as_ref().is_none_or(|b| merit(&st) < merit(b)) {
            *best = Some(st.clone());
        }
        let best_iter = best.as_ref().map_or(iter, |b| b.iterations);
        if iter == settings.max_iterations || iter - best_iter > settings.stall_iterations {
            break;
        }
        let mu = gap / total_dim;

        let mut z_inv = Vec::with_capacity(data.blocks.len());
        for z in &st.z {
            match inverse_spd(z) {
                Some(zi) => z_inv.push(zi),
                None => {
                    return Outcome::Failed {
                        reason: "dual slack lost positive definiteness".into(),
                        iterations: iter,
                        state: st,
                    }
                }
            }
        }

        // Schur complement M_ij = Σ_b tr(F_i X F_j Z⁻¹)
        let mut schur = DMatrix::zeros(nvars, nvars);
        for (b, block) in data.blocks.iter().enumerate() {
            let products: Vec<DMatrix<f64>> = block
                .coeffs
                .iter()
                .map(|(_, fj)| &st.x[b] * fj * &z_inv[b])
                .collect();
            for (i, (vi, fi)) in block.coeffs.iter().enumerate() {
                for (j, (vj, _)) in block.coeffs.iter().enumerate().skip(i) {
                    let val = frob(fi, &products[j]);
                    schur[(*vi, *vj)] += val;
                    if i != j {
                        schur[(*vj, *vi)] += val;
                    }
                }
            }
        }

        let direction = |extra: &[DMatrix<f64>], sigma_mu: f64| -> Option<Direction> {
            // R = σμZ⁻¹ − X − X·Rd·Z⁻¹ + extra
            let mut rmat = Vec::with_capacity(data.blocks.len());
            let mut rhs = -rp.clone();
            for (b, block) in data.blocks.iter().enumerate() {
                let mut r = &z_inv[b] * sigma_mu - &st.x[b] - &st.x[b] * &rd[b] * &z_inv[b];
                if !extra.is_empty() {
                    r += &extra[b];
                }
                for (v, m) in &block.coeffs {
                    rhs[*v] += frob(m, &r);
                }
                rmat.push(r);
            }
            let mut dy = solve_schur(&schur, &rhs)?;
            // dX = R − X·(Σ dyᵢFᵢ)·Z⁻¹ must satisfy 𝒜(dX) = rp; refine dy
            // against the directly evaluated residual.
            let mut refinements = 0;
            loop {
                let mut dz = Vec::with_capacity(data.blocks.len());
                let mut dx = Vec::with_capacity(data.blocks.len());
                let mut mismatch = -rp.clone();
                for (b, block) in data.blocks.iter().enumerate() {
                    let mut sdy = DMatrix::zeros(block.f0.nrows(), block.f0.ncols());
                    for (v, m) in &block.coeffs {
                        sdy += m * dy[*v];
                    }
                    let step_x = sym(&rmat[b] - &st.x[b] * &sdy * &z_inv[b]);
                    for (v, m) in &block.coeffs {
                        mismatch[*v] += frob(m, &step_x);
                    }
                    dz.push(&rd[b] + sdy);
                    dx.push(step_x);
                }
                if dy.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                let target = rp.norm().max(rhs.norm() * 1e-14);
                if refinements == 2 || mismatch.norm() <= 1e-3 * target {
                    return Some(Direction { dx, dy, dz });
                }
                dy += solve_schur(&schur, &mismatch)?;
                refinements += 1;
            }
        };

        let Some(pred) = direction(&[], 0.0) else {
            return Outcome::Failed {
                reason: "Schur complement system is singular".into(),
                iterations: iter,
                state: st,
            };
        };
        let (ap, ad) = step_lengths(&st, &pred, 1.0);
        let mut gap_aff = 0.0;
        for b in 0..data.blocks.len() {
            let xa = &st.x[b] + &pred.dx[b] * ap;
            let za = &st.z[b] + &pred.dz[b] * ad;
            gap_aff += frob(&xa, &za);
        }
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
        let extra: Vec<DMatrix<f64>> = (0..data.blocks.len())
            .map(|b| -(&pred.dx[b] * &pred.dz[b] * &z_inv[b]))
            .collect();
        let Some(corr) = direction(&extra, sigma * mu) else {
            return Outcome::Failed {
                reason: "Schur complement system is singular".into(),
                iterations: iter,
                state: st,
            };
        };
        let (mut ap, mut ad) = step_lengths(&st, &corr, settings.step_fraction);
        let mut corr = corr;
        if ap.min(ad) < 0.1 {
            if let Some(centring) = direction(&[], sigma.max(0.5) * mu) {
                let (cp, cd) = step_lengths(&st, &centring, settings.step_fraction);
                if cp.min(cd) > ap.min(ad) {
                    (ap, ad, corr) = (cp, cd, centring);
                }
            }
        }
        if ap < 1e-10 && ad < 1e-10 {
            stalled += 1;
            if stalled >= 3 {
                return Outcome::Failed {
                    reason: "step lengths collapsed".into(),
                    iterations: iter,
                    state: st,
                };
            }
        } else {
            stalled = 0;
        }
        for b in 0..data.blocks.len() {
            st.x[b] = sym(&st.x[b] + &corr.dx[b] * ap);
            st.z[b] = sym(&st.z[b] + &corr.dz[b] * ad);
        }
        st.y += &corr.dy * ad;
        if st.y.amax() > 1e15 || st.x.iter().any(|x| x.amax() > 1e15) {
            return Outcome::Failed {
                reason: "iterates diverged".into(),
                iterations: iter,
                state: st,
            };
        }
    }
    let iterations = st.iterations;
    Outcome::Failed {
        reason: format!(
            "no convergence in {} iterations (gap {:.2e}, pinf {:.2e}, dinf {:.2e})",
            st.iterations,
            st.relative_gap,
            st.primal_infeasibility,
            st.dual_infeasibility
        ),
        iterations,
        state: st,
    }
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
    dz: Vec<DMatrix<f64>>,
}

fn step_lengths(st: &State, dir: &Direction, fraction: f64) -> (f64, f64) {
    let ap = st
        .x
        .iter()
        .zip(&dir.dx)
        .map(|(x, dx)| max_step(x, dx))
        .fold(f64::INFINITY, f64::min);
    let ad = st
        .z
        .iter()
        .zip(&dir.dz)
        .map(|(z, dz)| max_step(z, dz))
        .fold(f64::INFINITY, f64::min);
    ((fraction * ap).min(1.0), (fraction * ad).min(1.0))
}

fn finish(problem: &LmiProblem, data: &Data, st: State) -> Solution {
    let y = data.unscale(&st.y);
    let min_eig = problem
        .blocks()
        .iter()
        .map(|b| min_eigenvalue(&b.evaluate(&y)))
        .fold(f64::INFINITY, f64::min);
    Solution {
        objective: problem.objective_value(&y),
        y,
        iterations: st.iterations,
        primal_infeasibility: st.primal_infeasibility,
        dual_infeasibility: st.dual_infeasibility,
        relative_gap: st.relative_gap,
        min_eigenvalue: min_eig,
        reduced_accuracy: st.reduced_accuracy,
    }
}
