//! Exact zero-order-hold discretization and the structure-preserving
//! approximations SN, FN, AM and LM.

use nalgebra::DMatrix;
use passivnet_conic::{AffineMatrix, ConicSolver, LmiProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{all_finite, block_diag};
use crate::model::{ContinuousNetwork, ContinuousSubsystem, CouplingGraph, DiscreteSubsystem, NetworkModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Exact,
    #[serde(rename = "SN")]
    Sn,
    #[serde(rename = "FN")]
    Fn,
    #[serde(rename = "AM")]
    Am,
    #[serde(rename = "LM")]
    Lm,
}

impl Method {
    pub const APPROXIMATE: [Method; 4] = [Method::Sn, Method::Fn, Method::Am, Method::Lm];

    pub fn label(self) -> &'static str {
        match self {
            Method::Exact => "Exact",
            Method::Sn => "SN",
            Method::Fn => "FN",
            Method::Am => "AM",
            Method::Lm => "LM",
        }
    }
}

/// A global discrete-time pair `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl DiscreteSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `exp(A)` by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exponential(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("matrix exponential needs a square matrix".into()));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite("matrix exponential argument".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm1 = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or_else(|| Error::NonFinite("Padé denominator is singular".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Zero-order-hold pair `(e^{A_c Ts}, ∫₀^{Ts} e^{A_c s} ds · B)` from the
/// exponential of the augmented matrix `[[A_c, B], [0, 0]]·Ts`.
pub fn matrix_exponential_pair(
    a_c: &DMatrix<f64>,
    b_aug: &DMatrix<f64>,
    ts: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Parameter(format!("sampling time must be positive, got {ts}")));
    }
    let n = a_c.nrows();
    if a_c.ncols() != n || b_aug.nrows() != n {
        return Err(Error::Dimension(format!(
            "A is {:?}, B is {:?}",
            a_c.shape(),
            b_aug.shape()
        )));
    }
    if !all_finite(a_c) || !all_finite(b_aug) {
        return Err(Error::NonFinite("discretization input".into()));
    }
    let p = b_aug.ncols();
    let mut aug = DMatrix::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * ts));
    aug.view_mut((0, n), (n, p)).copy_from(&(b_aug * ts));
    let e = matrix_exponential(&aug)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, p)).into_owned(),
    ))
}

/// Exact discretization of the coupled global continuous system.
pub fn discretize_exact(network: &ContinuousNetwork, ts: f64) -> Result<DiscreteSystem> {
    let g = network.assemble(None)?;
    let (a, b) = matrix_exponential_pair(&g.a, &g.b, ts)?;
    Ok(DiscreteSystem { a, b })
}

fn hold_inputs(a_c: &DMatrix<f64>, sub: &ContinuousSubsystem, ts: f64) -> Result<DiscreteSubsystem> {
    let m = sub.m();
    let (a, bf) = matrix_exponential_pair(a_c, &concat_columns(&sub.b, &sub.f), ts)?;
    DiscreteSubsystem::new(
        a,
        bf.columns(0, m).into_owned(),
        bf.columns(m, m).into_owned(),
        sub.c.clone(),
    )
}

fn concat_columns(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    out
}

/// LM: the coupling input `v_i` is held over each sampling interval.
pub fn discretize_lm(sub: &ContinuousSubsystem, ts: f64) -> Result<DiscreteSubsystem> {
    hold_inputs(&sub.a, sub, ts)
}

/// AM: the self-coupling `−l_i·F_c·C` is kept in the drift and only the
/// neighbour term `w_i = Σ_j l_ij y_j` is held. `self_weight` is `L_ii`.
pub fn discretize_am(sub: &ContinuousSubsystem, self_weight: f64, ts: f64) -> Result<DiscreteSubsystem> {
    let drift = &sub.a - &sub.f * &sub.c * self_weight;
    hold_inputs(&drift, sub, ts)
}

pub fn discretize_network_lm(network: &ContinuousNetwork, ts: f64) -> Result<NetworkModel> {
    network.map_subsystems(|s| discretize_lm(s, ts))
}

/// AM-discretized network. Its coupling input is `w_i = Σ_{j∈N_i⁻} l_ij y_j`
/// rather than `v_i`, so it is kept separate from [`NetworkModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AmNetwork {
    pub subsystems: Vec<DiscreteSubsystem>,
    pub graph: CouplingGraph,
    /// Off-diagonal part of `−L̃`.
    pub adjacency: DMatrix<f64>,
}

impl AmNetwork {
    /// `A = blkdiag(A_i) + blkdiag(F_i)·Adj·C`, `B = blkdiag(B_i)`.
    pub fn global(&self) -> DiscreteSystem {
        let pick = |f: fn(&DiscreteSubsystem) -> &DMatrix<f64>| {
            block_diag(&self.subsystems.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        let a = pick(|s| &s.a) + pick(|s| &s.f) * &self.adjacency * pick(|s| &s.c);
        DiscreteSystem { a, b: pick(|s| &s.b) }
    }
}

pub fn discretize_network_am(network: &ContinuousNetwork, ts: f64) -> Result<AmNetwork> {
    let l = network.laplacian();
    let subsystems = network
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, s)| discretize_am(s, l[(i, i)], ts))
        .collect::<Result<Vec<_>>>()?;
    let mut adjacency = -network.expanded_laplacian().clone();
    let m = network.output_dim();
    for i in 0..network.len() {
        adjacency.view_mut((i * m, i * m), (m, m)).fill(0.0);
    }
    Ok(AmNetwork {
        subsystems,
        graph: network.graph().clone(),
        adjacency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Spectral,
    Frobenius,
}

/// Entries of the global model allowed to be nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    pub a: DMatrix<bool>,
    pub b: DMatrix<bool>,
}

/// Pattern of the continuous interconnection: every diagonal block plus the
/// structural nonzeros of the coupled drift for `A`, block diagonal for `B`.
pub fn structure_pattern(network: &ContinuousNetwork) -> Result<SparsityPattern> {
    let g = network.assemble(None)?;
    let (n, m) = (network.n(), network.m());
    let mut a = g.a.map(|v| v != 0.0);
    let mut b = DMatrix::from_element(n, m, false);
    let mut r = 0;
    let mut c = 0;
    for s in network.subsystems() {
        a.view_mut((r, r), (s.n(), s.n())).fill(true);
        b.view_mut((r, c), (s.n(), s.m())).fill(true);
        r += s.n();
        c += s.m();
    }
    Ok(SparsityPattern { a, b })
}

/// Entrywise truncation to `pattern`; the Frobenius-optimal projection.
pub fn truncate(m: &DMatrix<f64>, pattern: &DMatrix<bool>) -> DMatrix<f64> {
    m.zip_map(pattern, |v, keep| if keep { v } else { 0.0 })
}

/// Pattern-constrained matrix closest to `target` in spectral norm:
/// `min t` s.t. `[[tI, Err], [Errᵀ, tI]] ⪰ 0` with `Err = target − X`.
pub fn spectral_projection(
    target: &DMatrix<f64>,
    pattern: &DMatrix<bool>,
    solver: &dyn ConicSolver,
) -> Result<DMatrix<f64>> {
    let (r, c) = target.shape();
    let fixed = target.zip_map(pattern, |v, keep| if keep { 0.0 } else { v });
    if fixed.iter().all(|v| *v == 0.0) {
        return Ok(target.clone());
    }
    // Pattern entries of Err are free; the others are fixed at the target.
    let mut prob = LmiProblem::new();
    let t = prob.add_scalar_var();
    let mut err = AffineMatrix::constant(fixed);
    let mut free = Vec::new();
    for j in 0..c {
        for i in 0..r {
            if pattern[(i, j)] {
                let v = prob.add_scalar_var();
                let var = *v.terms().keys().next().expect("scalar variable");
                let mut e = DMatrix::zeros(r, c);
                e[(i, j)] = 1.0;
                err = err + AffineMatrix::from_term(var, e);
                free.push((i, j, var));
            }
        }
    }
    let t_var = *t.terms().keys().next().expect("scalar variable");
    let t_r = AffineMatrix::from_term(t_var, DMatrix::identity(r, r));
    let t_c = AffineMatrix::from_term(t_var, DMatrix::identity(c, c));
    let lmi = AffineMatrix::from_blocks(&[vec![t_r, err.clone()], vec![err.transpose(), t_c]])?;
    prob.add_lmi("spectral epigraph", &lmi)?;
    prob.set_objective(&t, 1.0)?;
    let sol = solver.solve(&prob)?;
    let mut out = truncate(target, pattern);
    for (i, j, var) in free {
        out[(i, j)] -= sol.y[var];
    }
    Ok(out)
}

/// SN / FN model: the structured global pair closest to the exact one.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredModel {
    pub system: DiscreteSystem,
    pub pattern: SparsityPattern,
    pub norm: NormKind,
}

pub fn discretize_sn_fn(
    network: &ContinuousNetwork,
    exact: &DiscreteSystem,
    norm: NormKind,
    solver: &dyn ConicSolver,
) -> Result<StructuredModel> {
    let pattern = structure_pattern(network)?;
    if exact.a.shape() != pattern.a.shape() || exact.b.shape() != pattern.b.shape() {
        return Err(Error::Dimension("exact model does not match the network".into()));
    }
    let system = match norm {
        NormKind::Frobenius => DiscreteSystem {
            a: truncate(&exact.a, &pattern.a),
            b: truncate(&exact.b, &pattern.b),
        },
        NormKind::Spectral => DiscreteSystem {
            a: spectral_projection(&exact.a, &pattern.a, solver)?,
            b: spectral_projection(&exact.b, &pattern.b, solver)?,
        },
    };
    Ok(StructuredModel {
        system,
        pattern,
        norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputClass {
    Impulse,
    Step,
    Random,
}

impl InputClass {
    pub const ALL: [InputClass; 3] = [InputClass::Impulse, InputClass::Step, InputClass::Random];

    pub fn label(self) -> &'static str {
        match self {
            InputClass::Impulse => "impulse",
            InputClass::Step => "step",
            InputClass::Random => "random",
        }
    }

    /// `horizon` input vectors of length `m`. Random inputs are i.i.d.
    /// uniform on [−1, 1].
    pub fn sequence(self, m: usize, horizon: usize, seed: u64) -> Vec<nalgebra::DVector<f64>> {
        match self {
            InputClass::Impulse => (0..horizon)
                .map(|k| nalgebra::DVector::from_element(m, if k == 0 { 1.0 } else { 0.0 }))
                .collect(),
            InputClass::Step => vec![nalgebra::DVector::from_element(m, 1.0); horizon],
            InputClass::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..horizon)
                    .map(|_| nalgebra::DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0)))
                    .collect()
            }
        }
    }
}

/// Table of RMSE values, rows indexed by input class, columns by method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub methods: Vec<Method>,
    pub rows: Vec<RmseRow>,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub input: InputClass,
    pub rmse: Vec<f64>,
}

impl RmseReport {
    pub fn get(&self, input: InputClass, method: Method) -> Option<f64> {
        let col = self.methods.iter().position(|&m| m == method)?;
        self.rows.iter().find(|r| r.input == input).map(|r| r.rmse[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("input");
        for m in &self.methods {
            out.push(',');
            out.push_str(m.label());
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.input.label());
            for v in &row.rmse {
                out.push_str(&format!(",{v:.6e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The exact model and all four structured approximations of a network.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub exact: DiscreteSystem,
    pub sn: StructuredModel,
    pub fn_: StructuredModel,
    pub am: AmNetwork,
    pub lm: NetworkModel,
}

impl ModelSet {
    pub fn build(network: &ContinuousNetwork, ts: f64, solver: &dyn ConicSolver) -> Result<Self> {
        let exact = discretize_exact(network, ts)?;
        Ok(Self {
            sn: discretize_sn_fn(network, &exact, NormKind::Spectral, solver)?,
            fn_: discretize_sn_fn(network, &exact, NormKind::Frobenius, solver)?,
            am: discretize_network_am(network, ts)?,
            lm: discretize_network_lm(network, ts)?,
            exact,
        })
    }

    pub fn global(&self, method: Method) -> Result<DiscreteSystem> {
        Ok(match method {
            Method::Exact => self.exact.clone(),
            Method::Sn => self.sn.system.clone(),
            Method::Fn => self.fn_.system.clone(),
            Method::Am => self.am.global(),
            Method::Lm => {
                let g = self.lm.assemble(None)?;
                DiscreteSystem { a: g.a, b: g.b }
            }
        })
    }
}

/// Open-loop response from zero state; returns the first two states of
/// every subsystem at steps `1..=horizon`.
fn response(sys: &DiscreteSystem, inputs: &[nalgebra::DVector<f64>], tracked: &[usize]) -> Vec<f64> {
    let mut x = nalgebra::DVector::zeros(sys.n());
    let mut out = Vec::with_capacity(inputs.len() * tracked.len());
    for u in inputs {
        x = &sys.a * &x + &sys.b * u;
        out.extend(tracked.iter().map(|&i| x[i]));
    }
    out
}

/// RMSE of every structured model against the exact model, over the first
/// two states (voltage and current for a DGU) of each subsystem.
pub fn rmse_compare(
    network: &ContinuousNetwork,
    models: &ModelSet,
    horizon: usize,
    inputs: &[InputClass],
    seed: u64,
) -> Result<RmseReport> {
    let tracked: Vec<usize> = network
        .state_offsets()
        .iter()
        .zip(network.subsystems())
        .flat_map(|(&o, s)| (0..s.n().min(2)).map(move |k| o + k))
        .collect();
    let methods = Method::APPROXIMATE.to_vec();
    let globals = methods
        .iter()
        .map(|&m| models.global(m))
        .collect::<Result<Vec<_>>>()?;
    let rows = inputs
        .iter()
        .map(|&class| {
            let u = class.sequence(network.m(), horizon, seed);
            let reference = response(&models.exact, &u, &tracked);
            let rmse = globals
                .iter()
                .map(|g| {
                    let r = response(g, &u, &tracked);
                    let sq: f64 = r.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum();
                    if reference.is_empty() {
                        0.0
                    } else {
                        (sq / reference.len() as f64).sqrt()
                    }
                })
                .collect();
            RmseRow { input: class, rmse }
        })
        .collect();
    Ok(RmseReport {
        methods,
        rows,
        horizon,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use passivnet_conic::InteriorPointSolver;

    /// Scaled Taylor series oracle.
    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let s = 8;
        let a = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn zero_drift_gives_identity_and_scaled_input() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let (a_d, b_d) = matrix_exponential_pair(&DMatrix::zeros(2, 2), &b, 0.1).unwrap();
        assert_relative_eq!(a_d, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_relative_eq!(b_d, b * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn scalar_exponential() {
        let (a_d, _) = matrix_exponential_pair(&DMatrix::from_element(1, 1, 1.0), &DMatrix::zeros(1, 1), 0.1).unwrap();
        assert_relative_eq!(a_d[(0, 0)], 0.1f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(a_d[(0, 0)], 1.105170918, epsilon = 1e-9);
    }

    #[test]
    fn matches_taylor_oracle() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.5, 2.0, -0.7, 0.1, -0.4, 0.9, 1.1]);
        let e = matrix_exponential(&a).unwrap();
        let t = taylor_expm(&a);
        assert!((&e - &t).norm() <= 1e-10 * t.norm());
    }

    #[test]
    fn large_norm_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-50.0, 10.0, 0.0, -40.0]);
        let e = matrix_exponential(&a).unwrap();
        assert_relative_eq!(e[(0, 0)], (-50f64).exp(), max_relative = 1e-10);
        assert_relative_eq!(e[(1, 1)], (-40f64).exp(), max_relative = 1e-10);
        let off = 10.0 * ((-40f64).exp() - (-50f64).exp()) / 10.0;
        assert_relative_eq!(e[(0, 1)], off, max_relative = 1e-10);
    }

    #[test]
    fn rejects_nonpositive_ts_and_nan() {
        let z = DMatrix::zeros(1, 1);
        assert!(matrix_exponential_pair(&z, &z, 0.0).is_err());
        assert!(matrix_exponential_pair(&DMatrix::from_element(1, 1, f64::NAN), &z, 1.0).is_err());
    }

    #[test]
    fn lm_with_zero_drift() {
        let e1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sub = ContinuousSubsystem::new(DMatrix::zeros(2, 2), e1.clone(), e1.clone(), e1.transpose()).unwrap();
        let d = discretize_lm(&sub, 0.01).unwrap();
        assert_relative_eq!(d.a, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_relative_eq!(d.b, &e1 * 0.01, epsilon = 1e-15);
        assert_relative_eq!(d.f, &e1 * 0.01, epsilon = 1e-15);
    }

    #[test]
    fn am_with_zero_self_weight_is_lm() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let f = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let sub = ContinuousSubsystem::new(a, b, f, c).unwrap();
        assert_eq!(discretize_am(&sub, 0.0, 0.1).unwrap(), discretize_lm(&sub, 0.1).unwrap());
        assert_ne!(discretize_am(&sub, 1.0, 0.1).unwrap(), discretize_lm(&sub, 0.1).unwrap());
    }

    #[test]
    fn frobenius_truncation_of_dense_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let pat = DMatrix::from_row_slice(2, 2, &[true, false, false, true]);
        let t = truncate(&m, &pat);
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        assert_relative_eq!((&m - &t).norm(), 13f64.sqrt());
        assert_eq!(truncate(&t, &pat), t);
    }

    #[test]
    fn spectral_projection_of_off_diagonal() {
        // Off-diagonal [[·, 1], [0, ·]] can not be reduced below 1 in spectral norm.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]);
        let pat = DMatrix::from_row_slice(2, 2, &[true, false, false, true]);
        let p = spectral_projection(&m, &pat, &InteriorPointSolver::default()).unwrap();
        let err = (&m - &p).singular_values().max();
        assert!((err - 1.0).abs() < 1e-6, "spectral error {err}");
    }
}
