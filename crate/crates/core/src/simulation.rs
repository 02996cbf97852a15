//! Closed-loop simulation on the exact model, tracking-error metrics, the
//! Monte Carlo harness and the ε₀ sweep.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certification::min_dissipation_eigenvalue;
use crate::lqr::{solve_dare_identity, LqrSolution};
use crate::microgrid::{Equilibrium, MicrogridPlant};
use crate::synthesis::{synthesize_network, CertificateSet, CostKind, SynthesisOptions};
use crate::{Error, Result};

/// 0.5 s at `Ts = 1e-5`.
pub const DEFAULT_HORIZON: usize = 50_000;
/// States beyond this norm count as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Closed-loop run in shifted coordinates: state `[V, I − I_l, s]` per DGU
/// and input `u = d − R·I_l/V_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sampling_time: f64,
    pub references: Vec<f64>,
    pub loads: Vec<f64>,
    /// `steps + 1` states.
    pub states: Vec<Vec<f64>>,
    /// Applied input `Kx + u_f` at each stored state.
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn dgu_count(&self) -> usize {
        self.references.len()
    }

    pub fn voltage(&self, k: usize, i: usize) -> f64 {
        self.states[k][3 * i]
    }

    /// Physical converter current `x₂ + I_l`.
    pub fn current(&self, k: usize, i: usize) -> f64 {
        self.states[k][3 * i + 1] + self.loads[i]
    }

    pub fn integrator(&self, k: usize, i: usize) -> f64 {
        self.states[k][3 * i + 2]
    }

    pub fn duty_cycle(&self, plant: &MicrogridPlant, k: usize, i: usize) -> f64 {
        let d = &plant.config.dgus[i];
        self.inputs[k][i] + d.r * self.loads[i] / d.v_in
    }

    pub fn final_voltage_error(&self) -> f64 {
        let k = self.steps();
        (0..self.dgu_count())
            .map(|i| (self.voltage(k, i) - self.references[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Columns `step,time,V_1..V_M,I_1..I_M,d_1..d_M`, every `stride`-th step.
    pub fn to_csv(&self, plant: &MicrogridPlant, stride: usize) -> String {
        let m = self.dgu_count();
        let mut out = String::from("step,time");
        for prefix in ["V", "I", "d"] {
            for i in 1..=m {
                let _ = write!(out, ",{prefix}_{i}");
            }
        }
        out.push('\n');
        for k in (0..self.states.len()).step_by(stride.max(1)) {
            let _ = write!(out, "{k},{:e}", k as f64 * self.sampling_time);
            for i in 0..m {
                let _ = write!(out, ",{:e}", self.voltage(k, i));
            }
            for i in 0..m {
                let _ = write!(out, ",{:e}", self.current(k, i));
            }
            for i in 0..m {
                let _ = write!(out, ",{:e}", self.duty_cycle(plant, k, i));
            }
            out.push('\n');
        }
        out
    }
}

/// Precomputed closed loop `x⁺ = A_cl x + c`, `u = Kx + u_f`.
struct ClosedLoop<'a> {
    a_cl: DMatrix<f64>,
    gain: &'a DMatrix<f64>,
    offset: DVector<f64>,
    u_f: DVector<f64>,
}

impl<'a> ClosedLoop<'a> {
    fn new(plant: &MicrogridPlant, gain: &'a DMatrix<f64>, references: &[f64]) -> Result<Self> {
        let (u_f, s_f) = plant.feedforward(gain, references)?;
        let (a_cl, offset) = plant.closed_loop(gain, &u_f, &s_f)?;
        Ok(Self { a_cl, gain, offset, u_f })
    }

    /// Calls `visit(k, x_k, u_k)` for `k = 0..=steps`.
    fn run(&self, x0: &DVector<f64>, steps: usize, mut visit: impl FnMut(usize, &DVector<f64>, &DVector<f64>)) -> Result<()> {
        let mut x = x0.clone();
        let mut next = DVector::zeros(x.len());
        let mut u = self.u_f.clone();
        for k in 0..=steps {
            if !x.iter().all(|v| v.is_finite()) || x.amax() > DIVERGENCE_BOUND {
                return Err(Error::Divergence { step: k });
            }
            u.copy_from(&self.u_f);
            u.gemv(1.0, self.gain, &x, 1.0);
            visit(k, &x, &u);
            if k == steps {
                break;
            }
            next.copy_from(&self.offset);
            next.gemv(1.0, &self.a_cl, &x, 1.0);
            std::mem::swap(&mut x, &mut next);
        }
        Ok(())
    }
}

fn check_scenario(plant: &MicrogridPlant, x0: &DVector<f64>, references: &[f64], loads: &[f64]) -> Result<()> {
    let m = plant.dgu_count();
    if x0.len() != plant.n() || references.len() != m || loads.len() != m {
        return Err(Error::Dimension(format!(
            "x0 {}, {} references, {} loads for a plant with {} states and {m} DGUs",
            x0.len(),
            references.len(),
            loads.len(),
            plant.n()
        )));
    }
    Ok(())
}

/// Iterates `x⁺ = A x + B(Kx + u_f) + B_s s_f` on the exact model.
pub fn simulate(plant: &MicrogridPlant, gain: &DMatrix<f64>, x0: &DVector<f64>, references: &[f64], loads: &[f64], steps: usize) -> Result<Trajectory> {
    check_scenario(plant, x0, references, loads)?;
    let cl = ClosedLoop::new(plant, gain, references)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    cl.run(x0, steps, |_, x, u| {
        states.push(x.as_slice().to_vec());
        inputs.push(u.as_slice().to_vec());
    })?;
    Ok(Trajectory {
        sampling_time: plant.config.sampling_time,
        references: references.to_vec(),
        loads: loads.to_vec(),
        states,
        inputs,
    })
}

/// `sqrt(Σ_k Σ_i ΔV² + ΔI² + Δs² + Δu²)` against the steady state.
pub fn tracking_error(traj: &Trajectory, eq: &Equilibrium) -> f64 {
    let mut sum = 0.0;
    for (x, u) in traj.states.iter().zip(&traj.inputs) {
        sum += squared_deviation(x, u, eq);
    }
    sum.sqrt()
}

fn squared_deviation(x: &[f64], u: &[f64], eq: &Equilibrium) -> f64 {
    let dx: f64 = x.iter().zip(eq.x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let du: f64 = u.iter().zip(eq.u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    dx + du
}

/// [`tracking_error`] without storing the trajectory.
pub fn tracking_error_of_run(plant: &MicrogridPlant, gain: &DMatrix<f64>, x0: &DVector<f64>, references: &[f64], loads: &[f64], steps: usize) -> Result<f64> {
    check_scenario(plant, x0, references, loads)?;
    let eq = plant.equilibrium(gain, references, loads)?;
    let cl = ClosedLoop::new(plant, gain, references)?;
    let mut sum = 0.0;
    cl.run(x0, steps, |_, x, u| sum += squared_deviation(x.as_slice(), u.as_slice(), &eq))?;
    Ok(sum.sqrt())
}

/// `J = (e_pbc − e_lqr)/e_lqr`.
pub fn suboptimality(e_pbc: f64, e_lqr: f64) -> Result<f64> {
    if e_lqr == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((e_pbc - e_lqr) / e_lqr)
}

/// Centralized LQR on the exact model with `Q = I`, `R = I`.
pub fn lqr_baseline(plant: &MicrogridPlant) -> Result<LqrSolution> {
    solve_dare_identity(&plant.exact.a, &plant.exact.b)
}

/// The three passivity-based controllers and the LQR baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controllers {
    pub pbc: Vec<CertificateSet>,
    pub lqr: LqrSolution,
}

impl Controllers {
    /// Synthesizes every cost on the LM model and the LQR on the exact one.
    pub fn synthesize(plant: &MicrogridPlant, options: &SynthesisOptions) -> Result<Self> {
        let lqr = lqr_baseline(plant)?;
        let pbc = CostKind::ALL
            .iter()
            .map(|&cost| synthesize_network(&plant.lm, cost, Some(&lqr), options))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pbc, lqr })
    }

    pub fn get(&self, cost: CostKind) -> Option<&CertificateSet> {
        self.pbc.iter().find(|c| c.cost == cost)
    }
}

/// Sampling protocol: the plant rests at the nominal equilibrium, then
/// references and loads jump to uniformly sampled values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub runs: usize,
    pub seed: u64,
    pub horizon: usize,
    pub nominal_reference: f64,
    pub nominal_load: f64,
    pub reference_range: (f64, f64),
    pub load_range: (f64, f64),
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            runs: 100,
            seed: 0,
            horizon: DEFAULT_HORIZON,
            nominal_reference: 50.0,
            nominal_load: 5.0,
            reference_range: (49.95, 50.05),
            load_range: (2.5, 7.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub references: Vec<f64>,
    pub loads: Vec<f64>,
    pub e_lqr: Option<f64>,
    /// Tracking error per cost, in the order of [`MonteCarloReport::costs`].
    pub e_pbc: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub cost: CostKind,
    pub mu_j: f64,
    pub sigma_j: f64,
    pub lambda_min: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub options: MonteCarloOptions,
    pub costs: Vec<CostKind>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<CostSummary>,
}

impl MonteCarloReport {
    pub fn summary_for(&self, cost: CostKind) -> Option<&CostSummary> {
        self.summary.iter().find(|s| s.cost == cost)
    }

    /// One row per cost: `cost,mu_J,sigma_J,lambda_min,runs,failures`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cost,mu_J,sigma_J,lambda_min,runs,failures\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{},{}", s.cost.label(), s.mu_j, s.sigma_j, s.lambda_min, s.successes, s.failures);
        }
        out
    }
}

/// Initial state after the jump: the nominal equilibrium with `x₂` shifted
/// so that the physical current is continuous.
fn jump_state(nominal: &Equilibrium, nominal_load: f64, loads: &[f64]) -> DVector<f64> {
    let mut x = nominal.x.clone();
    for (i, l) in loads.iter().enumerate() {
        x[3 * i + 1] += nominal_load - l;
    }
    x
}

fn sample_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn run_once(plant: &MicrogridPlant, gains: &[&DMatrix<f64>], options: &MonteCarloOptions, run: usize) -> RunRecord {
    let m = plant.dgu_count();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(run as u64);
    let references: Vec<f64> = (0..m).map(|_| sample_in(&mut rng, options.reference_range)).collect();
    let loads: Vec<f64> = (0..m).map(|_| sample_in(&mut rng, options.load_range)).collect();
    let nominal_refs = vec![options.nominal_reference; m];
    let nominal_loads = vec![options.nominal_load; m];
    let mut failures = Vec::new();
    let mut errors = Vec::with_capacity(gains.len());
    for (c, gain) in gains.iter().enumerate() {
        let result = plant
            .equilibrium(gain, &nominal_refs, &nominal_loads)
            .and_then(|nominal| {
                let x0 = jump_state(&nominal, options.nominal_load, &loads);
                tracking_error_of_run(plant, gain, &x0, &references, &loads, options.horizon)
            });
        match result {
            Ok(e) => errors.push(Some(e)),
            Err(err) => {
                failures.push(format!("controller {c}: {err}"));
                errors.push(None);
            }
        }
    }
    let e_lqr = errors.pop().flatten();
    RunRecord {
        run,
        references,
        loads,
        e_lqr,
        e_pbc: errors,
        failures,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs are independent and seeded per run index, so the report does not
/// depend on scheduling.
pub fn monte_carlo(plant: &MicrogridPlant, controllers: &Controllers, options: &MonteCarloOptions) -> Result<MonteCarloReport> {
    if options.runs == 0 || options.horizon == 0 {
        return Err(Error::Parameter("runs and horizon must be positive".into()));
    }
    for (lo, hi) in [options.reference_range, options.load_range] {
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Parameter(format!("invalid sampling interval [{lo}, {hi}]")));
        }
    }
    let costs: Vec<CostKind> = controllers.pbc.iter().map(|c| c.cost).collect();
    let gain_mats: Vec<DMatrix<f64>> = controllers.pbc.iter().map(|c| c.gain_matrix()).collect();
    let mut gains: Vec<&DMatrix<f64>> = gain_mats.iter().collect();
    gains.push(&controllers.lqr.k);
    let runs: Vec<RunRecord> = (0..options.runs)
        .into_par_iter()
        .map(|r| run_once(plant, &gains, options, r))
        .collect();
    let summary = controllers
        .pbc
        .iter()
        .enumerate()
        .map(|(c, set)| {
            let js: Vec<f64> = runs
                .iter()
                .filter_map(|r| match (r.e_pbc[c], r.e_lqr) {
                    (Some(e), Some(base)) => suboptimality(e, base).ok().filter(|j| j.is_finite()),
                    _ => None,
                })
                .collect();
            let (mu_j, sigma_j) = mean_std(&js);
            CostSummary {
                cost: set.cost,
                mu_j,
                sigma_j,
                lambda_min: min_dissipation_eigenvalue(&set.certificates),
                successes: js.len(),
                failures: runs.len() - js.len(),
            }
        })
        .collect();
    Ok(MonteCarloReport {
        options: options.clone(),
        costs,
        runs,
        summary,
    })
}

/// Step-response figures of the voltages after all references jump by the
/// same amount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Largest excursion beyond the new reference, in percent of the step.
    pub overshoot_percent: f64,
    /// First step after which every voltage stays within 2% of the step.
    pub settling_steps: Option<usize>,
    pub final_error: f64,
    /// Most sign changes of `V − V_r` on any DGU, ignoring errors below
    /// 0.1% of the step.
    pub oscillations: usize,
}

pub fn step_metrics(traj: &Trajectory, start: &[f64], band: f64) -> StepMetrics {
    let m = traj.dgu_count();
    let mut overshoot: f64 = 0.0;
    let mut last_outside = None;
    let mut signs = vec![0.0; m];
    let mut changes = vec![0usize; m];
    for k in 0..traj.states.len() {
        for i in 0..m {
            let step = traj.references[i] - start[i];
            if step == 0.0 {
                continue;
            }
            let rel = (traj.voltage(k, i) - traj.references[i]) / step;
            overshoot = overshoot.max(rel * 100.0);
            if rel.abs() > band {
                last_outside = Some(k);
            }
            if rel.abs() > 1e-3 {
                if signs[i] != 0.0 && rel.signum() != signs[i] {
                    changes[i] += 1;
                }
                signs[i] = rel.signum();
            }
        }
    }
    let settling_steps = match last_outside {
        None => Some(0),
        Some(k) if k + 1 < traj.states.len() => Some(k + 1),
        Some(_) => None,
    };
    StepMetrics {
        overshoot_percent: overshoot,
        settling_steps,
        final_error: traj.final_voltage_error(),
        oscillations: changes.into_iter().max().unwrap_or(0),
    }
}

/// Smallest damping ratio `−Re(s)/|s|` over the modes of a discrete closed
/// loop, with `s = ln(z)/Ts`. Poles on the positive real axis count as 1; a
/// negative real pole rings at the Nyquist rate and counts with `Im(s) = π/Ts`.
pub fn min_damping_ratio(a_closed: &DMatrix<f64>, sampling_time: f64) -> f64 {
    a_closed
        .complex_eigenvalues()
        .iter()
        .filter(|z| !(z.re > 0.0 && z.im.abs() <= 1e-12 * z.norm()))
        .map(|z| {
            let s = z.ln() / sampling_time;
            -s.re / s.norm()
        })
        .fold(1.0, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub costs: Vec<CostKind>,
    pub horizon: usize,
    /// Size of the reference step applied to every DGU (V).
    pub step: f64,
    /// Settling band as a fraction of the step.
    pub band: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            costs: CostKind::ALL.to_vec(),
            horizon: DEFAULT_HORIZON,
            step: 1.0,
            band: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps0: f64,
    /// Feasibility of every requested cost, same order as the options.
    pub feasible: Vec<(CostKind, bool)>,
    /// Reference-step response under `f^a`, when `f^a` is feasible.
    pub response: Option<StepMetrics>,
    pub spectral_radius: Option<f64>,
    /// [`min_damping_ratio`] of the `f^a` closed loop.
    pub damping_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub options: SweepOptions,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// `(ε₀, overshoot)` for every row with a simulated response.
    pub fn overshoots(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.response.as_ref().map(|m| (r.eps0, m.overshoot_percent)))
            .collect()
    }

    /// Kendall's τ between ε₀ and overshoot; `None` below three points.
    pub fn overshoot_trend(&self) -> Option<f64> {
        let pts = self.overshoots();
        (pts.len() >= 3).then(|| kendall_tau(&pts))
    }

    pub fn damping_ratios(&self) -> Vec<(f64, f64)> {
        self.rows.iter().filter_map(|r| r.damping_ratio.map(|z| (r.eps0, z))).collect()
    }

    /// Kendall's τ between ε₀ and the damping ratio; `None` below three points.
    pub fn damping_trend(&self) -> Option<f64> {
        let pts = self.damping_ratios();
        (pts.len() >= 3).then(|| kendall_tau(&pts))
    }

    /// Whether some cost is infeasible at the largest swept ε₀ while every
    /// cost is feasible at the smallest.
    pub fn feasibility_lost(&self) -> bool {
        match (self.rows.first(), self.rows.last()) {
            (Some(first), Some(last)) => first.feasible.iter().all(|f| f.1) && last.feasible.iter().all(|f| !f.1),
            _ => false,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps0");
        for c in &self.options.costs {
            let _ = write!(out, ",feasible_{}", c.label());
        }
        out.push_str(",overshoot_percent,settling_steps,oscillations,final_error,spectral_radius,damping_ratio\n");
        for row in &self.rows {
            let _ = write!(out, "{:e}", row.eps0);
            for (_, f) in &row.feasible {
                let _ = write!(out, ",{f}");
            }
            match &row.response {
                Some(r) => {
                    let settle = r.settling_steps.map(|s| s.to_string()).unwrap_or_default();
                    let _ = write!(out, ",{:e},{settle},{},{:e}", r.overshoot_percent, r.oscillations, r.final_error);
                }
                None => out.push_str(",,,,"),
            }
            for v in [row.spectral_radius, row.damping_ratio] {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:e}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Rank correlation in `[−1, 1]`; ties contribute zero.
pub fn kendall_tau(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut score = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = points[j].0 - points[i].0;
            let dy = points[j].1 - points[i].1;
            score += (dx * dy).signum() * f64::from(dx != 0.0 && dy != 0.0);
        }
    }
    score / (n * (n - 1) / 2) as f64
}

/// Synthesizes every cost for each ε₀; under `f^a` simulates the response
/// to a uniform reference step from the configured references.
pub fn eps0_sweep(plant: &MicrogridPlant, values: &[f64], base: &SynthesisOptions, options: &SweepOptions) -> Result<SweepReport> {
    if values.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Parameter("eps0 values must be sorted ascending".into()));
    }
    let lqr = if options.costs.contains(&CostKind::MimicLqr) {
        Some(lqr_baseline(plant)?)
    } else {
        None
    };
    let start = plant.config.references();
    let target: Vec<f64> = start.iter().map(|v| v + options.step).collect();
    let loads = plant.config.loads();
    let mut rows = Vec::with_capacity(values.len());
    for &eps0 in values {
        let opts = SynthesisOptions { eps0, ..base.clone() };
        let mut feasible = Vec::new();
        let mut response = None;
        let mut spectral_radius = None;
        let mut damping_ratio = None;
        for &cost in &options.costs {
            let set = synthesize_network(&plant.lm, cost, lqr.as_ref(), &opts);
            feasible.push((cost, set.is_ok()));
            if let (CostKind::Feasibility, Ok(set)) = (cost, set) {
                let gain = set.gain_matrix();
                let x0 = plant.equilibrium(&gain, &start, &loads)?.x;
                let traj = simulate(plant, &gain, &x0, &target, &loads, options.horizon)?;
                response = Some(step_metrics(&traj, &start, options.band));
                let a_closed = &plant.exact.a + &plant.exact.b * &gain;
                spectral_radius = Some(crate::linalg::spectral_radius(&a_closed));
                damping_ratio = Some(min_damping_ratio(&a_closed, plant.config.sampling_time));
            }
        }
        rows.push(SweepRow {
            eps0,
            feasible,
            response,
            spectral_radius,
            damping_ratio,
        });
    }
    Ok(SweepReport {
        options: options.clone(),
        rows,
    })
}
