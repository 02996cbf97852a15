//! Solver-free checks of passivity certificates and global stability.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{block_diag, min_sym_eigenvalue, quad_form, spectral_radius, symmetrize};
use crate::model::{DiscreteSubsystem, NetworkModel};
use crate::synthesis::{local_bounds, recheck_constraints, LocalCertificate, SynthesisOptions};
use crate::{Error, Result};

pub const DISSIPATION_TOLERANCE: f64 = 1e-9;
pub const LMI_TOLERANCE: f64 = 1e-7;
pub const CONGRUENCE_TOLERANCE: f64 = 1e-6;
pub const MAP_TOLERANCE: f64 = 1e-8;
pub const SPECTRAL_MARGIN: f64 = 1e-9;
pub const LYAPUNOV_TOLERANCE: f64 = 1e-9;
/// Standard deviation of the sampled states and coupling inputs.
pub const SAMPLE_STD: f64 = 10.0;
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Outcome of one check. `worst` is the smallest margin seen; the check
/// passes when `worst ≥ −tolerance` (for the spectral radius, when
/// `worst > tolerance`, see [`check_spectral_radius`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl CheckResult {
    fn margin(name: impl Into<String>, worst: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            name: name.into(),
            passed: worst >= -tolerance,
            worst,
            tolerance,
            samples,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<48} worst {:>12.4e}  tol {:.0e}  n {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.worst,
                c.tolerance,
                c.samples
            )?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "verification FAILED" })
    }
}

/// Slack `zᵀv − γ(x) − (V(x⁺) − V(x))` of the dissipation inequality at one
/// point, with `x⁺ = (A + BK)x + Fv` and `z = Cx + Dv`.
pub fn dissipation_slack(sub: &DiscreteSubsystem, cert: &LocalCertificate, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let a_cl = &sub.a + &sub.b * &cert.k;
    let next = &a_cl * x + &sub.f * v;
    let z = &sub.c * x + &cert.d * v;
    z.dot(v) - quad_form(&cert.gamma, x) - (quad_form(&cert.p, &next) - quad_form(&cert.p, x))
}

/// Samples `x, v ~ N(0, 10²)` and checks the local dissipation inequality.
pub fn check_dissipation_inequality(sub: &DiscreteSubsystem, cert: &LocalCertificate, samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, SAMPLE_STD).expect("valid normal");
    let a_cl = &sub.a + &sub.b * &cert.k;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let x = DVector::from_fn(sub.n(), |_, _| normal.sample(&mut rng));
        let v = DVector::from_fn(sub.m(), |_, _| normal.sample(&mut rng));
        let next = &a_cl * &x + &sub.f * &v;
        let z = &sub.c * &x + &cert.d * &v;
        let slack = z.dot(&v) - quad_form(&cert.gamma, &x) - (quad_form(&cert.p, &next) - quad_form(&cert.p, &x));
        worst = worst.min(slack);
    }
    if samples == 0 {
        worst = 0.0;
    }
    CheckResult::margin(format!("dissipation inequality [{}]", cert.index + 1), worst, DISSIPATION_TOLERANCE, samples)
}

/// `[P − A_clᵀPA_cl − Γ, ½Cᵀ − A_clᵀPF; ½C − FᵀPA_cl, ½(D+Dᵀ) − FᵀPF]`,
/// the quadratic form of the dissipation slack in `(x, v)`.
pub fn dissipation_matrix(sub: &DiscreteSubsystem, cert: &LocalCertificate) -> DMatrix<f64> {
    let (n, m) = (sub.n(), sub.m());
    let a_cl = &sub.a + &sub.b * &cert.k;
    let p = &cert.p;
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n))
        .copy_from(&(p - a_cl.transpose() * p * &a_cl - &cert.gamma));
    let off = sub.c.transpose() * 0.5 - a_cl.transpose() * p * &sub.f;
    out.view_mut((0, n), (n, m)).copy_from(&off);
    out.view_mut((n, 0), (m, n)).copy_from(&off.transpose());
    out.view_mut((n, n), (m, m))
        .copy_from(&((&cert.d + cert.d.transpose()) * 0.5 - sub.f.transpose() * p * &sub.f));
    symmetrize(&out)
}

/// Smallest eigenvalue of [`dissipation_matrix`] at the recovered
/// `(P, K, Γ, D)`.
pub fn check_map_consistency(sub: &DiscreteSubsystem, cert: &LocalCertificate) -> CheckResult {
    let worst = min_sym_eigenvalue(&dissipation_matrix(sub, cert));
    CheckResult::margin(format!("recovered dissipation matrix PSD [{}]", cert.index + 1), worst, CONGRUENCE_TOLERANCE, 1)
}

/// Relative residuals of `E·P = I`, `Γ·H = I`, `K·E = G` and `D = S`;
/// `worst` is minus the largest.
pub fn check_map_round_trip(cert: &LocalCertificate) -> CheckResult {
    let rel = |m: DMatrix<f64>, reference: f64| m.norm() / reference.max(f64::MIN_POSITIVE);
    let n = cert.e.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let worst = [
        rel(&cert.e * &cert.p - &id, id.norm()),
        rel(&cert.gamma * &cert.h - &id, id.norm()),
        rel(&cert.k * &cert.e - &cert.g, cert.g.norm().max(cert.k.norm() * cert.e.norm())),
        rel(&cert.d - &cert.s, cert.s.norm()),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    CheckResult::margin(format!("variable map round trip [{}]", cert.index + 1), -worst, MAP_TOLERANCE, 1)
}

fn check_certificates(network: &NetworkModel, certs: &[LocalCertificate]) -> Result<()> {
    if certs.len() != network.len() {
        return Err(Error::Dimension(format!("{} certificates for {} subsystems", certs.len(), network.len())));
    }
    for (i, (c, s)) in certs.iter().zip(network.subsystems()).enumerate() {
        if c.p.shape() != (s.n(), s.n()) || c.gamma.shape() != (s.n(), s.n()) || c.d.shape() != (s.m(), s.m()) || c.k.shape() != (s.m(), s.n())
            || c.e.shape() != c.p.shape() || c.h.shape() != c.gamma.shape() || c.g.shape() != c.k.shape() || c.s.shape() != c.d.shape()
        {
            return Err(Error::Dimension(format!("certificate {} does not match its subsystem", i + 1)));
        }
    }
    Ok(())
}

/// `((D+Dᵀ)/2)⁻¹` of the stacked certificates.
fn sym_d_inverse(certs: &[LocalCertificate]) -> Result<DMatrix<f64>> {
    let d = block_diag(&certs.iter().map(|c| c.d.clone()).collect::<Vec<_>>());
    symmetrize(&d)
        .cholesky()
        .map(|c| symmetrize(&c.inverse()))
        .ok_or_else(|| Error::NotPositiveDefinite("(D + Dᵀ)/2".into()))
}

fn two_block(top_left: DMatrix<f64>, off: &DMatrix<f64>, bottom_right: DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (top_left.nrows(), bottom_right.nrows());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&top_left);
    out.view_mut((0, n), (n, m)).copy_from(&off.transpose());
    out.view_mut((n, 0), (m, n)).copy_from(off);
    out.view_mut((n, n), (m, m)).copy_from(&bottom_right);
    symmetrize(&out)
}

/// `[Γ − ε₀I + CᵀL̃C, CᵀL̃ᵀ; L̃C, ((D+Dᵀ)/2)⁻¹]`.
pub fn global_stability_matrix(network: &NetworkModel, certs: &[LocalCertificate], eps0: f64) -> Result<DMatrix<f64>> {
    check_certificates(network, certs)?;
    let c = network.c_global();
    let lt = network.expanded_laplacian();
    let n = network.n();
    let gamma = block_diag(&certs.iter().map(|c| c.gamma.clone()).collect::<Vec<_>>());
    let top = gamma - DMatrix::identity(n, n) * eps0 + c.transpose() * lt * &c;
    Ok(two_block(top, &(lt * &c), sym_d_inverse(certs)?))
}

/// `[Γ − ε₀I, CᵀL̃ᵀ; L̃C, ((D+Dᵀ)/2)⁻¹]`, the form the local bounds make
/// diagonally dominant.
pub fn decoupled_stability_matrix(network: &NetworkModel, certs: &[LocalCertificate], eps0: f64) -> Result<DMatrix<f64>> {
    check_certificates(network, certs)?;
    let c = network.c_global();
    let lt = network.expanded_laplacian();
    let n = network.n();
    let gamma = block_diag(&certs.iter().map(|c| c.gamma.clone()).collect::<Vec<_>>());
    Ok(two_block(gamma - DMatrix::identity(n, n) * eps0, &(lt * &c), sym_d_inverse(certs)?))
}

/// Worst row margin `m_ii − Σ_{j≠i} |m_ij|`.
pub fn diagonal_dominance_margin(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| {
            let off: f64 = (0..m.ncols()).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
            m[(i, i)] - off
        })
        .fold(f64::INFINITY, f64::min)
}

/// Both global matrices and the diagonal-dominance margin of the decoupled one.
pub fn check_global_stability_lmi(network: &NetworkModel, certs: &[LocalCertificate], eps0: f64) -> Result<Vec<CheckResult>> {
    let coupled = global_stability_matrix(network, certs, eps0)?;
    let decoupled = decoupled_stability_matrix(network, certs, eps0)?;
    Ok(vec![
        CheckResult::margin("global stability LMI (coupled form)", min_sym_eigenvalue(&coupled), LMI_TOLERANCE, 1),
        CheckResult::margin("global stability LMI (decoupled form)", min_sym_eigenvalue(&decoupled), LMI_TOLERANCE, 1),
        CheckResult::margin("diagonal dominance of decoupled form", diagonal_dominance_margin(&decoupled), LMI_TOLERANCE, 1),
    ])
}

/// Passes when `ρ(A) < 1 − 1e-9`; `worst` holds `1 − 1e-9 − ρ`.
pub fn check_spectral_radius(name: &str, a_closed: &DMatrix<f64>) -> CheckResult {
    let rho = spectral_radius(a_closed);
    let worst = 1.0 - SPECTRAL_MARGIN - rho;
    CheckResult {
        name: format!("{name} spectral radius {rho:.9}"),
        passed: worst > 0.0,
        worst,
        tolerance: SPECTRAL_MARGIN,
        samples: 1,
    }
}

/// Spectral radius of the network closed with its certificates' gains.
pub fn check_network_spectral_radius(network: &NetworkModel, certs: &[LocalCertificate]) -> Result<CheckResult> {
    check_certificates(network, certs)?;
    let gains: Vec<_> = certs.iter().map(|c| c.k.clone()).collect();
    let g = network.assemble(Some(&gains))?;
    Ok(check_spectral_radius("closed loop", g.a_closed.as_ref().expect("gains supplied")))
}

/// `V(x_{k+1}) − V(x_k) ≤ −ε₀‖x_k‖² + 1e-9` along a trajectory, with
/// `V = Σ x_iᵀP_i x_i`. `worst` is the smallest slack.
pub fn check_lyapunov_decrease(trajectory: &[DVector<f64>], certs: &[LocalCertificate], eps0: f64) -> Result<CheckResult> {
    let p = block_diag(&certs.iter().map(|c| c.p.clone()).collect::<Vec<_>>());
    if let Some(x) = trajectory.iter().find(|x| x.len() != p.nrows()) {
        return Err(Error::Dimension(format!("state of length {} for storage of size {}", x.len(), p.nrows())));
    }
    let worst = trajectory
        .windows(2)
        .map(|w| -eps0 * w[0].norm_squared() - (quad_form(&p, &w[1]) - quad_form(&p, &w[0])))
        .fold(f64::INFINITY, f64::min);
    let steps = trajectory.len().saturating_sub(1);
    Ok(CheckResult::margin(
        "Lyapunov decrease along trajectory",
        if steps == 0 { 0.0 } else { worst },
        LYAPUNOV_TOLERANCE,
        steps,
    ))
}

/// Smallest diagonal entry of all `Γ_i`.
pub fn min_dissipation_eigenvalue(certs: &[LocalCertificate]) -> f64 {
    certs
        .iter()
        .flat_map(|c| c.gamma.diagonal().iter().copied().collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// Free trajectory of `x⁺ = A x` for `steps` steps.
pub fn free_trajectory(a: &DMatrix<f64>, x0: DVector<f64>, steps: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0);
    for k in 0..steps {
        let next = a * &out[k];
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Length of the LM trajectory used for the Lyapunov check.
    pub trajectory_steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            trajectory_steps: 2000,
        }
    }
}

/// Runs every check on a certificate set synthesized for `network`.
pub fn verify(network: &NetworkModel, certs: &[LocalCertificate], synthesis: &SynthesisOptions, options: &VerifyOptions) -> Result<VerificationReport> {
    check_certificates(network, certs)?;
    let coupling = network.coupling_matrices();
    let per_sub: Vec<Vec<CheckResult>> = certs
        .par_iter()
        .enumerate()
        .map(|(i, cert)| -> Result<Vec<CheckResult>> {
            let sub = &network.subsystems()[i];
            let bounds = local_bounds(&coupling.u_blocks[i], &coupling.w_blocks[i], synthesis.eps0);
            let mut out: Vec<CheckResult> = recheck_constraints(sub, cert, &bounds, synthesis.eps_i)?
                .into_iter()
                .map(|c| CheckResult::margin(format!("{} [{}]", c.name, i + 1), c.residual, LMI_TOLERANCE, 1))
                .collect();
            out.push(check_dissipation_inequality(sub, cert, options.samples, options.seed.wrapping_add(i as u64)));
            out.push(check_map_round_trip(cert));
            out.push(check_map_consistency(sub, cert));
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut report = VerificationReport::default();
    for checks in per_sub {
        report.checks.extend(checks);
    }
    report.checks.extend(check_global_stability_lmi(network, certs, synthesis.eps0)?);
    report.push(check_network_spectral_radius(network, certs)?);

    let gains: Vec<_> = certs.iter().map(|c| c.k.clone()).collect();
    let a_cl = network.assemble(Some(&gains))?.a_closed.expect("gains supplied");
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let x0 = DVector::from_fn(network.n(), |_, _| normal.sample(&mut rng));
    let traj = free_trajectory(&a_cl, x0, options.trajectory_steps);
    report.push(check_lyapunov_decrease(&traj, certs, synthesis.eps0)?);
    Ok(report)
}
