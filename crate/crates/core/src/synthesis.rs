//! Local semidefinite programs: one per subsystem, each certifying passivity
//! of the closed loop with respect to `(v_i, z_i)` plus the bounds that make
//! local passivity imply global stability.

use nalgebra::{DMatrix, DVector};
use passivnet_conic::{analytic_center, AffineMatrix, CenteringSettings, ConicSolver, InteriorPointSolver, LmiProblem, Settings, Solution, SolveError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{min_sym_eigenvalue, row_abs_sums, symmetrize};
use crate::lqr::LqrSolution;
use crate::model::{DiscreteSubsystem, NetworkModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostKind {
    /// `f^a = 0`.
    #[serde(rename = "a")]
    Feasibility,
    /// `f^b = trace(H)`.
    #[serde(rename = "b")]
    MaxDissipation,
    /// `f^c = ‖E − E_c‖_F`.
    #[serde(rename = "c")]
    MimicLqr,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [CostKind::Feasibility, CostKind::MaxDissipation, CostKind::MimicLqr];

    pub fn label(self) -> &'static str {
        match self {
            CostKind::Feasibility => "a",
            CostKind::MaxDissipation => "b",
            CostKind::MimicLqr => "c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" => Some(CostKind::Feasibility),
            "b" => Some(CostKind::MaxDissipation),
            "c" => Some(CostKind::MimicLqr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    Feasibility,
    MaxDissipation,
    /// Target block `E_ci` of `P_c⁻¹`.
    MimicLqr { target: DMatrix<f64> },
}

impl CostSpec {
    pub fn kind(&self) -> CostKind {
        match self {
            CostSpec::Feasibility => CostKind::Feasibility,
            CostSpec::MaxDissipation => CostKind::MaxDissipation,
            CostSpec::MimicLqr { .. } => CostKind::MimicLqr,
        }
    }

    /// Value of the cost at numeric `(E, H)`.
    pub fn evaluate(&self, e: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
        match self {
            CostSpec::Feasibility => 0.0,
            CostSpec::MaxDissipation => h.trace(),
            CostSpec::MimicLqr { target } => (e - target).norm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub eps_i: f64,
    pub eps0: f64,
    /// Upper bound on `[S]_k` for rows with `|U_i|_k = 0`.
    pub s_cap: f64,
    /// The passivity LMI is imposed as `⪰ lmi_margin·I`.
    pub lmi_margin: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            eps_i: 1e-6,
            eps0: 1e-3,
            s_cap: 1e4,
            lmi_margin: 1e-7,
            tolerance: 1e-8,
            max_iterations: 150,
        }
    }
}

impl SynthesisOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_i", self.eps_i), ("eps0", self.eps0), ("s_cap", self.s_cap), ("tolerance", self.tolerance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lmi_margin >= 0.0 && self.lmi_margin.is_finite()) {
            return Err(Error::Parameter("lmi_margin must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn solver(&self, equilibrate: bool) -> InteriorPointSolver {
        InteriorPointSolver::new(Settings {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            equilibrate,
            ..Settings::default()
        })
    }
}

/// Decision variables of one local program.
#[derive(Debug, Clone)]
pub struct LocalVariables {
    pub e: AffineMatrix,
    pub g: AffineMatrix,
    pub h: AffineMatrix,
    pub s: AffineMatrix,
}

/// The 4×4 block matrix
/// `[E, ½ECᵀ, (AE+BG)ᵀ, E; ½CE, ½(S+Sᵀ), Fᵀ, 0; AE+BG, F, E, 0; E, 0, 0, H]`.
pub fn build_passivity_lmi(sub: &DiscreteSubsystem, vars: &LocalVariables) -> Result<AffineMatrix> {
    let (n, m) = (sub.n(), sub.m());
    for (name, v, want) in [("E", &vars.e, (n, n)), ("G", &vars.g, (m, n)), ("H", &vars.h, (n, n)), ("S", &vars.s, (m, m))] {
        if v.shape() != want {
            return Err(Error::Dimension(format!("{name} is {:?}, expected {want:?}", v.shape())));
        }
    }
    let e = &vars.e;
    let closed = &e.left_mul(&sub.a) + &vars.g.left_mul(&sub.b);
    let ect = e.right_mul(&sub.c.transpose()).scale(0.5);
    let s_sym = (&vars.s + &vars.s.transpose()).scale(0.5);
    let f = AffineMatrix::constant(sub.f.clone());
    let z = AffineMatrix::zeros;
    let grid = vec![
        vec![e.clone(), ect.clone(), closed.transpose(), e.clone()],
        vec![ect.transpose(), s_sym, f.transpose(), z(m, n)],
        vec![closed, f, e.clone(), z(n, n)],
        vec![e.clone(), z(n, m), z(n, n), vars.h.clone()],
    ];
    Ok(AffineMatrix::from_blocks(&grid)?)
}

/// Numeric version of [`build_passivity_lmi`].
pub fn passivity_matrix(sub: &DiscreteSubsystem, e: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let vars = LocalVariables {
        e: AffineMatrix::constant(e.clone()),
        g: AffineMatrix::constant(g.clone()),
        h: AffineMatrix::constant(h.clone()),
        s: AffineMatrix::constant(s.clone()),
    };
    Ok(build_passivity_lmi(sub, &vars)?.constant_part().clone())
}

/// Upper bounds `[H]_j ≤ 1/(|W_i|_j + ε₀)` and `[S]_k ≤ 1/|U_i|_k` (the
/// latter `None` where the row of `U_i` is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBounds {
    pub h_upper: Vec<f64>,
    pub s_upper: Vec<Option<f64>>,
}

pub fn local_bounds(u_i: &DMatrix<f64>, w_i: &DMatrix<f64>, eps0: f64) -> LocalBounds {
    LocalBounds {
        h_upper: row_abs_sums(w_i).into_iter().map(|w| 1.0 / (w + eps0)).collect(),
        s_upper: row_abs_sums(u_i)
            .into_iter()
            .map(|u| if u > 0.0 { Some(1.0 / u) } else { None })
            .collect(),
    }
}

/// One subsystem's program, ready to hand to a conic solver.
#[derive(Debug, Clone)]
pub struct LocalSdp {
    pub subsystem: DiscreteSubsystem,
    pub problem: LmiProblem,
    pub vars: LocalVariables,
    pub bounds: LocalBounds,
    pub cost: CostSpec,
    pub eps_i: f64,
    pub eps0: f64,
}

fn scalar_constant(v: f64) -> AffineMatrix {
    AffineMatrix::constant(DMatrix::from_element(1, 1, v))
}

pub fn build_local_sdp(
    sub: &DiscreteSubsystem,
    u_i: &DMatrix<f64>,
    w_i: &DMatrix<f64>,
    cost: CostSpec,
    options: &SynthesisOptions,
) -> Result<LocalSdp> {
    build_scaled_local_sdp(sub, u_i, w_i, cost, options, &DVector::from_element(sub.n(), 1.0))
}

/// Same program posed in the coordinates `x̃ = T⁻¹x`, `T = diag(scale)`.
/// Every constraint is the congruence transform of the unscaled one, so the
/// feasible set is unchanged; the variables in the returned [`LocalSdp`]
/// are expressed in the original coordinates.
pub fn build_scaled_local_sdp(
    sub: &DiscreteSubsystem,
    u_i: &DMatrix<f64>,
    w_i: &DMatrix<f64>,
    cost: CostSpec,
    options: &SynthesisOptions,
    scale: &DVector<f64>,
) -> Result<LocalSdp> {
    options.validate()?;
    let (n, m) = (sub.n(), sub.m());
    if u_i.nrows() != m || w_i.nrows() != n {
        return Err(Error::Dimension(format!(
            "U_i has {} rows and W_i {}, expected {m} and {n}",
            u_i.nrows(),
            w_i.nrows()
        )));
    }
    if scale.len() != n || scale.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Parameter(format!("state scaling must hold {n} positive entries")));
    }
    if let CostSpec::MimicLqr { target } = &cost {
        if target.shape() != (n, n) {
            return Err(Error::Dimension(format!("f^c target is {:?}, expected {:?}", target.shape(), (n, n))));
        }
    }
    let t = DMatrix::from_diagonal(scale);
    let t_inv = DMatrix::from_diagonal(&scale.map(|v| 1.0 / v));
    let scaled = DiscreteSubsystem::new(&t_inv * &sub.a * &t, &t_inv * &sub.b, &t_inv * &sub.f, &sub.c * &t)?;

    let mut problem = LmiProblem::new();
    let tilde = LocalVariables {
        e: problem.add_symmetric_var(n),
        g: problem.add_matrix_var(m, n),
        h: problem.add_diagonal_var(n),
        s: problem.add_diagonal_var(m),
    };
    let vars = LocalVariables {
        e: tilde.e.left_mul(&t).right_mul(&t),
        g: tilde.g.right_mul(&t),
        h: tilde.h.left_mul(&t).right_mul(&t),
        s: tilde.s.clone(),
    };
    let lmi = build_passivity_lmi(&scaled, &tilde)?;
    let inv_sq: Vec<f64> = scale.iter().map(|v| 1.0 / (v * v)).collect();
    let mut margin = Vec::with_capacity(lmi.nrows());
    margin.extend(&inv_sq);
    margin.extend(std::iter::repeat_n(1.0, m));
    margin.extend(&inv_sq);
    margin.extend(&inv_sq);
    let margin = DMatrix::from_diagonal(&DVector::from_vec(margin)) * options.lmi_margin;
    problem.add_lmi("passivity", &(&lmi - &AffineMatrix::constant(margin)))?;
    let e_floor = DMatrix::from_diagonal(&DVector::from_vec(inv_sq.clone())) * options.eps_i;
    problem.add_lmi("E ⪰ ε_i I", &(&tilde.e - &AffineMatrix::constant(e_floor)))?;

    let bounds = local_bounds(u_i, w_i, options.eps0);
    for (j, ub) in bounds.h_upper.iter().enumerate() {
        let hj = tilde.h.entry(j, j);
        problem.add_lmi(&format!("H[{j}] > 0"), &hj)?;
        problem.add_lmi(&format!("H[{j}] upper"), &(&scalar_constant(ub * inv_sq[j]) - &hj))?;
    }
    for (k, ub) in bounds.s_upper.iter().enumerate() {
        let sk = tilde.s.entry(k, k);
        problem.add_lmi(&format!("S[{k}] > 0"), &sk)?;
        let cap = ub.unwrap_or(options.s_cap);
        problem.add_lmi(&format!("S[{k}] upper"), &(&scalar_constant(cap) - &sk))?;
    }
    build_cost(&mut problem, &vars, &cost)?;
    Ok(LocalSdp {
        subsystem: sub.clone(),
        problem,
        vars,
        bounds,
        cost,
        eps_i: options.eps_i,
        eps0: options.eps0,
    })
}

/// State scaling `√diag(E)` taken from a feasible point.
pub fn scaling_from(e: &DMatrix<f64>) -> DVector<f64> {
    e.diagonal().map(|v| v.max(f64::MIN_POSITIVE).sqrt())
}

/// Adds the objective. `f^c` uses the epigraph `[[t, eᵀ], [e, tI]] ⪰ 0`
/// where `e` lists the diagonal and `√2`-scaled upper entries of `E − E_c`.
pub fn build_cost(problem: &mut LmiProblem, vars: &LocalVariables, cost: &CostSpec) -> Result<()> {
    match cost {
        CostSpec::Feasibility => {}
        CostSpec::MaxDissipation => {
            for j in 0..vars.h.nrows() {
                problem.set_objective(&vars.h.entry(j, j), 1.0)?;
            }
        }
        CostSpec::MimicLqr { target } => {
            let diff = &vars.e - &AffineMatrix::constant(target.clone());
            let n = diff.nrows();
            let mut entries = Vec::new();
            for j in 0..n {
                for i in 0..=j {
                    let w = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                    entries.push(diff.entry(i, j).scale(w));
                }
            }
            let k = entries.len();
            let t = problem.add_scalar_var();
            let t_var = *t.terms().keys().next().expect("scalar variable");
            let mut column = AffineMatrix::zeros(k, 1);
            for (r, ent) in entries.iter().enumerate() {
                let mut lift = DMatrix::zeros(k, 1);
                lift[(r, 0)] = 1.0;
                column = &column + &ent.left_mul(&lift);
            }
            let t_i = AffineMatrix::from_term(t_var, DMatrix::identity(k, k));
            let arrow = AffineMatrix::from_blocks(&[vec![t.clone(), column.transpose()], vec![column, t_i]])?;
            problem.add_lmi("Frobenius epigraph", &arrow)?;
            problem.set_objective(&t, 1.0)?;
        }
    }
    Ok(())
}

/// Solver statistics recorded with a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub relative_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    /// Smallest eigenvalue over all constraint blocks at the returned point.
    pub min_constraint_eigenvalue: f64,
    pub equilibrated: bool,
    pub reduced_accuracy: bool,
    /// Newton steps taken towards the analytic centre, when centred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centering_iterations: Option<usize>,
}

/// Controller and passivity certificate of one subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCertificate {
    pub index: usize,
    pub cost: CostKind,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub p: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub gamma: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub d: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub e: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub g: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub h: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub s: DMatrix<f64>,
    pub objective: f64,
    pub solver: SolverReport,
}

/// `P = E⁻¹`, `K = G·E⁻¹`, `Γ = H⁻¹`, `D = S`.
pub fn apply_map(e: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let e_sym = symmetrize(e);
    let chol = e_sym.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("E".into()))?;
    let n = e.nrows();
    let p = symmetrize(&chol.solve(&DMatrix::identity(n, n)));
    let k = chol.solve(&g.transpose()).transpose();
    let mut gamma = DMatrix::zeros(n, n);
    for j in 0..n {
        if !(h[(j, j)] > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("H[{j}] = {}", h[(j, j)])));
        }
        gamma[(j, j)] = 1.0 / h[(j, j)];
    }
    Ok((p, k, gamma, s.clone()))
}

fn evaluate_vars(sdp: &LocalSdp, y: &[f64]) -> [DMatrix<f64>; 4] {
    [
        symmetrize(&sdp.vars.e.evaluate(y)),
        sdp.vars.g.evaluate(y),
        sdp.vars.h.evaluate(y),
        sdp.vars.s.evaluate(y),
    ]
}

fn map_solver_error(index: usize, err: SolveError) -> Error {
    match err {
        SolveError::Infeasible { margin, .. } => Error::Infeasible { subsystem: index, margin },
        SolveError::NumericalFailure { reason, .. } => Error::SolverNumerical { subsystem: index, reason },
        SolveError::Unbounded(reason) => Error::SolverNumerical {
            subsystem: index,
            reason: format!("unbounded: {reason}"),
        },
        other => Error::Solver(other),
    }
}

fn solve_with_retry(sdp: &LocalSdp, index: usize, solver: &dyn ConicSolver, retry: Option<&dyn ConicSolver>) -> Result<(Solution, bool)> {
    let (outcome, equilibrated) = match solver.solve(&sdp.problem) {
        Err(SolveError::NumericalFailure { .. }) if retry.is_some() => (retry.expect("checked").solve(&sdp.problem), true),
        other => (other, false),
    };
    outcome.map(|sol| (sol, equilibrated)).map_err(|err| map_solver_error(index, err))
}

fn certificate(sdp: &LocalSdp, index: usize, y: &[f64], solver: SolverReport) -> Result<LocalCertificate> {
    let [e, g, h, s] = evaluate_vars(sdp, y);
    let (p, k, gamma, d) = apply_map(&e, &g, &h, &s)?;
    Ok(LocalCertificate {
        index,
        cost: sdp.cost.kind(),
        objective: sdp.cost.evaluate(&e, &h),
        k,
        p,
        gamma,
        d,
        e,
        g,
        h,
        s,
        solver,
    })
}

fn report(sol: &Solution, equilibrated: bool) -> SolverReport {
    SolverReport {
        iterations: sol.iterations,
        relative_gap: sol.relative_gap,
        primal_infeasibility: sol.primal_infeasibility,
        dual_infeasibility: sol.dual_infeasibility,
        min_constraint_eigenvalue: sol.min_eigenvalue,
        equilibrated,
        reduced_accuracy: sol.reduced_accuracy,
        centering_iterations: None,
    }
}

/// Solves with `solver`; a numerical failure is retried once with
/// equilibrated data using the default interior-point settings.
pub fn solve_local_sdp(sdp: &LocalSdp, index: usize, solver: &dyn ConicSolver, retry: Option<&dyn ConicSolver>) -> Result<LocalCertificate> {
    let (sol, equilibrated) = solve_with_retry(sdp, index, solver, retry)?;
    certificate(sdp, index, &sol.y, report(&sol, equilibrated))
}

/// Like [`solve_local_sdp`], then moves the point to the analytic centre of
/// the feasible set. The returned certificate no longer depends on the path
/// the solver took.
pub fn solve_centered(sdp: &LocalSdp, index: usize, solver: &dyn ConicSolver, retry: Option<&dyn ConicSolver>) -> Result<LocalCertificate> {
    let (sol, equilibrated) = solve_with_retry(sdp, index, solver, retry)?;
    let mut rep = report(&sol, equilibrated);
    if sol.min_eigenvalue <= 0.0 {
        return certificate(sdp, index, &sol.y, rep);
    }
    let center = analytic_center(&sdp.problem, &sol.y, &CenteringSettings::default()).map_err(|err| map_solver_error(index, err))?;
    rep.min_constraint_eigenvalue = sdp.problem.min_eigenvalue(&center.y);
    rep.centering_iterations = Some(center.iterations);
    certificate(sdp, index, &center.y, rep)
}

/// Residuals of every constraint of the local program, recomputed from the
/// raw variables. Nonnegative means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub residual: f64,
}

pub fn recheck_constraints(sub: &DiscreteSubsystem, cert: &LocalCertificate, bounds: &LocalBounds, eps_i: f64) -> Result<Vec<ConstraintCheck>> {
    let mut out = Vec::new();
    let lmi = passivity_matrix(sub, &cert.e, &cert.g, &cert.h, &cert.s)?;
    out.push(ConstraintCheck {
        name: "passivity LMI".into(),
        residual: min_sym_eigenvalue(&lmi),
    });
    let n = cert.e.nrows();
    out.push(ConstraintCheck {
        name: "E - eps_i I".into(),
        residual: min_sym_eigenvalue(&(&cert.e - DMatrix::identity(n, n) * eps_i)),
    });
    let off_diag = |m: &DMatrix<f64>| {
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    worst = worst.max(m[(i, j)].abs());
                }
            }
        }
        -worst
    };
    out.push(ConstraintCheck { name: "H diagonal".into(), residual: off_diag(&cert.h) });
    out.push(ConstraintCheck { name: "S diagonal".into(), residual: off_diag(&cert.s) });
    for (j, ub) in bounds.h_upper.iter().enumerate() {
        out.push(ConstraintCheck { name: format!("H[{j}] > 0"), residual: cert.h[(j, j)] });
        out.push(ConstraintCheck { name: format!("H[{j}] <= 1/(|W_i|_j + eps0)"), residual: ub - cert.h[(j, j)] });
    }
    for (k, ub) in bounds.s_upper.iter().enumerate() {
        out.push(ConstraintCheck { name: format!("S[{k}] > 0"), residual: cert.s[(k, k)] });
        if let Some(ub) = ub {
            out.push(ConstraintCheck { name: format!("S[{k}] <= 1/|U_i|_k"), residual: ub - cert.s[(k, k)] });
        }
    }
    Ok(out)
}

/// Diagonal block `T_i P_c⁻¹ T_iᵀ` for every subsystem.
pub fn lqr_targets(network: &NetworkModel, lqr: &LqrSolution) -> Result<Vec<DMatrix<f64>>> {
    let n = network.n();
    if lqr.p.shape() != (n, n) {
        return Err(Error::Dimension(format!("P_c is {:?}, expected {:?}", lqr.p.shape(), (n, n))));
    }
    let chol = symmetrize(&lqr.p).cholesky().ok_or_else(|| Error::NotPositiveDefinite("P_c".into()))?;
    let inv = chol.inverse();
    Ok(network
        .state_offsets()
        .iter()
        .zip(network.subsystems())
        .map(|(&o, s)| inv.view((o, o), (s.n(), s.n())).into_owned())
        .collect())
}

/// Certificates for every subsystem of a network under one cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSet {
    pub cost: CostKind,
    pub options: SynthesisOptions,
    pub certificates: Vec<LocalCertificate>,
}

impl CertificateSet {
    pub fn gains(&self) -> Vec<DMatrix<f64>> {
        self.certificates.iter().map(|c| c.k.clone()).collect()
    }

    pub fn gain_matrix(&self) -> DMatrix<f64> {
        crate::linalg::block_diag(&self.gains())
    }
}

/// Solves every local program in parallel and returns one result per
/// subsystem.
pub fn synthesize_all(network: &NetworkModel, cost: CostKind, lqr: Option<&LqrSolution>, options: &SynthesisOptions) -> Result<Vec<Result<LocalCertificate>>> {
    options.validate()?;
    if !network.is_symmetric() {
        return Err(Error::Graph("synthesis requires symmetric coupling weights".into()));
    }
    let targets = match cost {
        CostKind::MimicLqr => Some(lqr_targets(network, lqr.ok_or(Error::MissingLqr)?)?),
        _ => None,
    };
    let coupling = network.coupling_matrices();
    let solver = options.solver(false);
    let retry = options.solver(true);
    Ok((0..network.len())
        .into_par_iter()
        .map(|i| {
            let spec = match cost {
                CostKind::Feasibility => CostSpec::Feasibility,
                CostKind::MaxDissipation => CostSpec::MaxDissipation,
                CostKind::MimicLqr => CostSpec::MimicLqr {
                    target: targets.as_ref().expect("targets computed")[i].clone(),
                },
            };
            let (sub, u_i, w_i) = (&network.subsystems()[i], &coupling.u_blocks[i], &coupling.w_blocks[i]);
            let feasible = build_local_sdp(sub, u_i, w_i, CostSpec::Feasibility, options)?;
            if cost == CostKind::Feasibility {
                return solve_centered(&feasible, i, &solver, Some(&retry));
            }
            let first = solve_local_sdp(&feasible, i, &solver, Some(&retry))?;
            // The feasible point fixes a state scaling for the optimizing solve.
            let sdp = build_scaled_local_sdp(sub, u_i, w_i, spec, options, &scaling_from(&first.e))?;
            solve_local_sdp(&sdp, i, &solver, Some(&retry))
        })
        .collect())
}

/// Like [`synthesize_all`] but fails on the first subsystem without a
/// certificate.
pub fn synthesize_network(network: &NetworkModel, cost: CostKind, lqr: Option<&LqrSolution>, options: &SynthesisOptions) -> Result<CertificateSet> {
    let certificates = synthesize_all(network, cost, lqr, options)?.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CertificateSet {
        cost,
        options: options.clone(),
        certificates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sub(a: f64, b: f64, f: f64) -> DiscreteSubsystem {
        let s = |v| DMatrix::from_element(1, 1, v);
        DiscreteSubsystem::new(s(a), s(b), s(f), s(1.0)).unwrap()
    }

    #[test]
    fn lmi_size_for_three_states_one_output() {
        let a = DMatrix::identity(3, 3);
        let b = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let sub = DiscreteSubsystem::new(a, b.clone(), b, c).unwrap();
        let mut p = LmiProblem::new();
        let vars = LocalVariables {
            e: p.add_symmetric_var(3),
            g: p.add_matrix_var(1, 3),
            h: p.add_diagonal_var(3),
            s: p.add_diagonal_var(1),
        };
        assert_eq!(build_passivity_lmi(&sub, &vars).unwrap().shape(), (10, 10));
    }

    #[test]
    fn trivial_point_is_psd_with_zero_eigenvalue() {
        let sub = DiscreteSubsystem::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let one = DMatrix::identity(1, 1);
        let m = passivity_matrix(&sub, &one, &DMatrix::zeros(1, 1), &one, &one).unwrap();
        // [E, 0, 0, E; 0, S, 0, 0; 0, 0, E, 0; E, 0, 0, H] has eigenvalues {0, 1, 1, 2}
        assert!(min_sym_eigenvalue(&m).abs() < 1e-12);
    }

    #[test]
    fn bound_arithmetic() {
        let w = DMatrix::from_row_slice(2, 2, &[4.0, -5.0, 0.0, 0.0]);
        let u = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = local_bounds(&u, &w, 1.0);
        assert_eq!(b.h_upper, vec![0.1, 1.0]);
        assert_eq!(b.s_upper, vec![None]);
    }

    #[test]
    fn cost_values() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[2.0, 3.0, 4.0]));
        let e = DMatrix::identity(3, 3);
        assert_eq!(CostSpec::Feasibility.evaluate(&e, &h), 0.0);
        assert_eq!(CostSpec::MaxDissipation.evaluate(&e, &h), 9.0);
        assert_eq!(CostSpec::MimicLqr { target: e.clone() }.evaluate(&e, &h), 0.0);
    }

    fn solve_scalar(a: f64, b: f64, cost: CostSpec) -> Result<LocalCertificate> {
        let opts = SynthesisOptions::default();
        let sdp = build_local_sdp(&scalar_sub(a, b, 0.0), &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), cost, &opts)?;
        solve_local_sdp(&sdp, 0, &opts.solver(false), None)
    }

    #[test]
    fn decoupled_scalar_is_stabilized() {
        let cert = solve_scalar(0.5, 1.0, CostSpec::Feasibility).unwrap();
        assert!((0.5 + cert.k[(0, 0)]).abs() < 1.0);
        assert!((&cert.e * &cert.p - DMatrix::identity(1, 1)).amax() < 1e-8);
    }

    #[test]
    fn uncontrollable_unstable_scalar_is_infeasible() {
        let err = solve_scalar(2.0, 0.0, CostSpec::Feasibility).unwrap_err();
        assert!(matches!(err, Error::Infeasible { subsystem: 0, .. }), "{err:?}");
    }

    #[test]
    fn max_dissipation_does_not_exceed_feasibility_trace() {
        let a = solve_scalar(0.5, 1.0, CostSpec::Feasibility).unwrap();
        let b = solve_scalar(0.5, 1.0, CostSpec::MaxDissipation).unwrap();
        assert!(b.objective <= a.h.trace() + 1e-8);
    }

    #[test]
    fn mimic_target_reached_when_feasible() {
        let target = DMatrix::from_element(1, 1, 2.0);
        let c = solve_scalar(0.5, 1.0, CostSpec::MimicLqr { target: target.clone() }).unwrap();
        assert!(c.objective < 1e-6, "objective {}", c.objective);
    }

    #[test]
    fn scaling_preserves_the_optimum() {
        let a = DMatrix::from_row_slice(2, 2, &[1.01, 0.2, -0.1, 0.95]);
        let sub = DiscreteSubsystem::new(a, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DMatrix::from_row_slice(2, 1, &[0.3, 0.0]), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let u = DMatrix::from_element(1, 2, 0.4);
        let w = DMatrix::from_row_slice(2, 1, &[0.4, 0.0]);
        let opts = SynthesisOptions::default();
        let solver = opts.solver(false);
        let plain = build_local_sdp(&sub, &u, &w, CostSpec::MaxDissipation, &opts).unwrap();
        let scale = nalgebra::DVector::from_row_slice(&[10.0, 0.1]);
        let scaled = build_scaled_local_sdp(&sub, &u, &w, CostSpec::MaxDissipation, &opts, &scale).unwrap();
        let cp = solve_local_sdp(&plain, 0, &solver, None).unwrap();
        let cs = solve_local_sdp(&scaled, 0, &solver, None).unwrap();
        assert!((cp.objective - cs.objective).abs() <= 1e-5 * cp.objective.abs().max(1.0), "{} vs {}", cp.objective, cs.objective);
        for c in recheck_constraints(&sub, &cs, &scaled.bounds, opts.eps_i).unwrap() {
            assert!(c.residual >= -1e-7, "{} {}", c.name, c.residual);
        }
    }
}
