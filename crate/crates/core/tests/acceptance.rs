//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! status 1 if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use passivnet::certification::{
    check_dissipation_inequality, check_map_consistency, decoupled_stability_matrix, global_stability_matrix, verify, VerifyOptions,
};
use passivnet::conic::InteriorPointSolver;
use passivnet::discretization::{matrix_exponential, matrix_exponential_pair, rmse_compare, structure_pattern, truncate, InputClass, Method, ModelSet};
use passivnet::linalg::{min_sym_eigenvalue, spectral_radius};
use passivnet::lqr::{riccati_residual, solve_dare, DareOptions};
use passivnet::microgrid::{default_references, MicrogridConfig, MicrogridPlant};
use passivnet::model::{build_laplacian, CouplingGraph, DiscreteSubsystem, Edge, NetworkModel};
use passivnet::simulation::{
    eps0_sweep, lqr_baseline, monte_carlo, simulate, Controllers, MonteCarloOptions, SweepOptions, DEFAULT_HORIZON,
};
use passivnet::synthesis::{local_bounds, recheck_constraints, synthesize_all, synthesize_network, CostKind, SynthesisOptions};

const RMSE_HORIZON: usize = 1000;
const RMSE_BUDGET: Duration = Duration::from_secs(30);
const MONTE_CARLO_BUDGET: Duration = Duration::from_secs(600);
const CONSTRAINT_TOL: f64 = 1e-7;
const GLOBAL_LMI_TOL: f64 = 1e-7;
const SAMPLES: usize = 10_000;
const CONGRUENCE_TOL: f64 = 1e-6;
const RANDOM_INSTANCES: usize = 20;
const SCALAR_DARE_TOL: f64 = 1e-8;
const DARE_RESIDUAL_TOL: f64 = 1e-10;
const CONVERGENCE_TOL: f64 = 1e-3;
const SEMIGROUP_TOL: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-12;
/// Minimum Kendall τ between ε₀ and the closed-loop damping ratio.
const TREND_TAU: f64 = 0.5;
const WORKING_RANGE: [f64; 3] = [1e-4, 1e-3, 1e-2];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn plant() -> MicrogridPlant {
    MicrogridPlant::new(MicrogridConfig::default_six_dgu()).expect("bundled config")
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn discretization_ordering(plant: &MicrogridPlant) -> Outcome {
    let started = Instant::now();
    let models = ModelSet::build(&plant.continuous, plant.config.sampling_time, &InteriorPointSolver::default()).map_err(fmt_err)?;
    let report = rmse_compare(&plant.continuous, &models, RMSE_HORIZON, &InputClass::ALL, 0).map_err(fmt_err)?;
    let elapsed = started.elapsed();
    let mut detail = Vec::new();
    for input in InputClass::ALL {
        let get = |m| report.get(input, m).expect("method present");
        let lm = get(Method::Lm);
        let others = [Method::Sn, Method::Fn, Method::Am].map(get);
        let best_other = others.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(lm < best_other, format!("{}: LM {lm:.3e} vs best other {best_other:.3e}", input.label()))?;
        detail.push(format!("{} LM {lm:.2e} < {best_other:.2e}", input.label()));
    }
    ensure(elapsed < RMSE_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("{}; {:.1?}", detail.join(", "), elapsed))
}

fn synthesis_feasibility(plant: &MicrogridPlant) -> Outcome {
    let lqr = lqr_baseline(plant).map_err(fmt_err)?;
    let coupling = plant.lm.coupling_matrices();
    let mut worst = f64::INFINITY;
    for eps0 in WORKING_RANGE {
        let options = SynthesisOptions { eps0, ..SynthesisOptions::default() };
        for cost in CostKind::ALL {
            let results = synthesize_all(&plant.lm, cost, Some(&lqr), &options).map_err(fmt_err)?;
            for (i, r) in results.into_iter().enumerate() {
                let cert = r.map_err(|e| format!("eps0 {eps0:e}, cost {}: {e}", cost.label()))?;
                let bounds = local_bounds(&coupling.u_blocks[i], &coupling.w_blocks[i], eps0);
                for c in recheck_constraints(&plant.lm.subsystems()[i], &cert, &bounds, options.eps_i).map_err(fmt_err)? {
                    ensure(
                        c.residual >= -CONSTRAINT_TOL,
                        format!("eps0 {eps0:e}, cost {}, subsystem {}: {} residual {:e}", cost.label(), i + 1, c.name, c.residual),
                    )?;
                    worst = worst.min(c.residual);
                }
            }
        }
    }
    Ok(format!("18 programs x 6 subsystems feasible; worst residual {worst:.2e}"))
}

fn certificate_validity(plant: &MicrogridPlant) -> Outcome {
    let lqr = lqr_baseline(plant).map_err(fmt_err)?;
    let options = SynthesisOptions::default();
    let verify_options = VerifyOptions { samples: SAMPLES, ..VerifyOptions::default() };
    let mut detail = Vec::new();
    for cost in CostKind::ALL {
        let set = synthesize_network(&plant.lm, cost, Some(&lqr), &options).map_err(fmt_err)?;
        for (i, cert) in set.certificates.iter().enumerate() {
            let check = check_dissipation_inequality(&plant.lm.subsystems()[i], cert, SAMPLES, i as u64);
            ensure(check.passed, format!("cost {}: {}", cost.label(), check.name))?;
        }
        let coupled = min_sym_eigenvalue(&global_stability_matrix(&plant.lm, &set.certificates, options.eps0).map_err(fmt_err)?);
        let decoupled = min_sym_eigenvalue(&decoupled_stability_matrix(&plant.lm, &set.certificates, options.eps0).map_err(fmt_err)?);
        ensure(coupled >= -GLOBAL_LMI_TOL, format!("cost {}: coupled matrix min eig {coupled:e}", cost.label()))?;
        ensure(decoupled >= -GLOBAL_LMI_TOL, format!("cost {}: decoupled matrix min eig {decoupled:e}", cost.label()))?;
        let a_cl = plant.lm.assemble(Some(&set.gains())).map_err(fmt_err)?.a_closed.expect("gains");
        let rho = spectral_radius(&a_cl);
        ensure(rho < 1.0, format!("cost {}: spectral radius {rho}", cost.label()))?;
        let report = verify(&plant.lm, &set.certificates, &options, &verify_options).map_err(fmt_err)?;
        ensure(report.passed(), format!("cost {}: verify failed\n{report}", cost.label()))?;
        detail.push(format!("{}: rho {rho:.6}, eig {coupled:.1e}/{decoupled:.1e}", cost.label()));
    }
    Ok(detail.join("; "))
}

fn random_network(rng: &mut ChaCha8Rng) -> NetworkModel {
    let count = rng.random_range(2..=4);
    let u = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..=s));
    let subs = (0..count)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let a = u(rng, n, n, 1.0);
            let b = u(rng, n, 1, 1.0);
            let f = u(rng, n, 1, 0.5);
            let c = u(rng, 1, n, 1.0);
            DiscreteSubsystem::new(a, b, f, c).expect("consistent shapes")
        })
        .collect();
    let pairs: Vec<(usize, usize, f64)> = (1..count).map(|i| (i - 1, i, rng.random_range(0.01..0.5))).collect();
    NetworkModel::new(subs, CouplingGraph::undirected(count, &pairs).expect("valid graph")).expect("valid network")
}

fn map_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let options = SynthesisOptions::default();
    let (mut instances, mut networks, mut worst) = (0usize, 0usize, f64::INFINITY);
    while instances < RANDOM_INSTANCES && networks < 500 {
        networks += 1;
        let net = random_network(&mut rng);
        let results = synthesize_all(&net, CostKind::Feasibility, None, &options).map_err(fmt_err)?;
        for (i, r) in results.into_iter().enumerate() {
            let Ok(cert) = r else { continue };
            let check = check_map_consistency(&net.subsystems()[i], &cert);
            ensure(check.worst >= -CONGRUENCE_TOL, format!("network {networks}, subsystem {}: {:e}", i + 1, check.worst))?;
            worst = worst.min(check.worst);
            instances += 1;
        }
    }
    ensure(instances >= RANDOM_INSTANCES, format!("only {instances} feasible instances in {networks} networks"))?;
    Ok(format!("{instances} feasible instances from {networks} networks; worst min eig {worst:.2e}"))
}

/// Positive root of `b²p² + (r − a²r − qb²)p − qr = 0`.
fn scalar_dare_oracle(a: f64, b: f64, q: f64, r: f64) -> f64 {
    let lin = r - a * a * r - q * b * b;
    (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b)
}

fn riccati(plant: &MicrogridPlant) -> Outcome {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let mut worst: f64 = 0.0;
    for (a, b, q, r) in [(1.2, 1.0, 1.0, 1.0), (0.5, 2.0, 3.0, 0.5), (-1.7, 0.3, 0.2, 4.0)] {
        let sol = solve_dare(&s(a), &s(b), &s(q), &s(r), &DareOptions::default()).map_err(fmt_err)?;
        let oracle = scalar_dare_oracle(a, b, q, r);
        let err = (sol.p[(0, 0)] - oracle).abs();
        ensure(err <= SCALAR_DARE_TOL, format!("a={a}: P {} vs oracle {oracle}", sol.p[(0, 0)]))?;
        worst = worst.max(err);
    }
    let lqr = lqr_baseline(plant).map_err(fmt_err)?;
    let (a, b) = (&plant.exact.a, &plant.exact.b);
    let residual = riccati_residual(a, b, &lqr.q, &lqr.r, &lqr.p).map_err(fmt_err)?;
    ensure(residual <= DARE_RESIDUAL_TOL, format!("microgrid residual {residual:e}"))?;
    let rho = spectral_radius(&(a + b * &lqr.k));
    ensure(rho < 1.0, format!("rho(A + BK_c) = {rho}"))?;
    Ok(format!("scalar error {worst:.1e}; residual {residual:.1e}; rho {rho:.6}"))
}

fn convergence(plant: &MicrogridPlant) -> Outcome {
    let lqr = lqr_baseline(plant).map_err(fmt_err)?;
    let options = SynthesisOptions::default();
    let references = default_references(plant.dgu_count());
    let loads = plant.config.loads();
    let nominal = vec![50.0; plant.dgu_count()];
    let seconds = DEFAULT_HORIZON as f64 * plant.config.sampling_time;
    let mut detail = Vec::new();
    for cost in CostKind::ALL {
        let set = synthesize_network(&plant.lm, cost, Some(&lqr), &options).map_err(fmt_err)?;
        let gain = set.gain_matrix();
        let x0 = plant.equilibrium(&gain, &nominal, &loads).map_err(fmt_err)?.x;
        let traj = simulate(plant, &gain, &x0, &references, &loads, DEFAULT_HORIZON).map_err(fmt_err)?;
        let err = traj.final_voltage_error();
        ensure(err <= CONVERGENCE_TOL, format!("cost {}: max |V - V_r| = {err:e} at {seconds} s", cost.label()))?;
        detail.push(format!("{}: {err:.1e} V", cost.label()));
    }
    Ok(format!("max |V - V_r| at {seconds} s: {}", detail.join(", ")))
}

fn monte_carlo_ordering(plant: &MicrogridPlant) -> Outcome {
    let started = Instant::now();
    let controllers = Controllers::synthesize(plant, &SynthesisOptions::default()).map_err(fmt_err)?;
    let options = MonteCarloOptions::default();
    let report = monte_carlo(plant, &controllers, &options).map_err(fmt_err)?;
    let elapsed = started.elapsed();
    let get = |c| report.summary_for(c).expect("cost summarized");
    let (a, b, c) = (get(CostKind::Feasibility), get(CostKind::MaxDissipation), get(CostKind::MimicLqr));
    for s in [a, b, c] {
        ensure(s.failures == 0 && s.successes == options.runs, format!("cost {}: {} failed runs", s.cost.label(), s.failures))?;
    }
    ensure(c.mu_j < a.mu_j && a.mu_j < b.mu_j, format!("mu_J a {:.4} b {:.4} c {:.4}", a.mu_j, b.mu_j, c.mu_j))?;
    ensure(b.lambda_min >= c.lambda_min, format!("lambda_min b {:e} < c {:e}", b.lambda_min, c.lambda_min))?;

    let subset = MonteCarloOptions { runs: 10, ..options.clone() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(fmt_err)?;
    let serial = pool.install(|| monte_carlo(plant, &controllers, &subset)).map_err(fmt_err)?;
    ensure(serial.runs[..] == report.runs[..10], "single-threaded rerun differs from the parallel run")?;
    ensure(elapsed < MONTE_CARLO_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "mu_J c {:.3} < a {:.3} < b {:.3}; lambda_min b {:.2e} >= c {:.2e}; deterministic; {:.1?}",
        c.mu_j, a.mu_j, b.mu_j, b.lambda_min, c.lambda_min, elapsed
    ))
}

fn eps0_trend(plant: &MicrogridPlant) -> Outcome {
    let base = SynthesisOptions::default();
    let options = SweepOptions::default();
    let range = eps0_sweep(plant, &[1e-4, 1e0], &base, &options).map_err(fmt_err)?;
    ensure(range.feasibility_lost(), "feasibility not lost at eps0 = 1")?;

    let decades: Vec<f64> = (-8..=-1).map(|p| 10f64.powi(p)).collect();
    let sweep = eps0_sweep(plant, &decades, &base, &options).map_err(fmt_err)?;
    let tau = sweep.damping_trend().ok_or("fewer than 3 feasible sweep points")?;
    ensure(tau >= TREND_TAU, format!("damping Kendall tau {tau:.2}"))?;
    let metrics: Vec<_> = sweep.rows.iter().map(|r| r.response.clone().ok_or(format!("f^a infeasible at {:e}", r.eps0))).collect::<Result<_, _>>()?;
    ensure(
        metrics.windows(2).all(|w| w[1].oscillations <= w[0].oscillations),
        format!("oscillation counts not nonincreasing: {:?}", metrics.iter().map(|m| m.oscillations).collect::<Vec<_>>()),
    )?;
    let zeta = sweep.damping_ratios();
    let (small, large) = (zeta[0].1, zeta[zeta.len() - 1].1);
    ensure(small < 0.1 && metrics[0].oscillations > 3, format!("smallest eps0 not underdamped: zeta {small:.3}"))?;
    ensure(large >= 0.7, format!("largest eps0 damping ratio {large:.3}"))?;

    let working = eps0_sweep(plant, &WORKING_RANGE, &base, &SweepOptions { costs: vec![CostKind::Feasibility], ..options }).map_err(fmt_err)?;
    let resp: Vec<_> = working.rows.iter().map(|r| r.response.clone().expect("feasible in the working range")).collect();
    let overshoots: Vec<f64> = resp.iter().map(|m| m.overshoot_percent).collect();
    ensure(overshoots.windows(2).all(|w| w[0] < w[1]), format!("overshoot {overshoots:?} not increasing"))?;
    let settling: Vec<usize> = resp.iter().map(|m| m.settling_steps.unwrap_or(usize::MAX)).collect();
    ensure(settling.windows(2).all(|w| w[0] <= w[1]), format!("settling {settling:?} not nondecreasing"))?;
    let full_tau = sweep.overshoot_trend().unwrap_or(f64::NAN);
    Ok(format!(
        "lost at 1e0; zeta {small:.3} -> {large:.3} (tau {tau:.2}); oscillations {} -> {}; overshoot {:.2}% -> {:.2}% on 1e-4..1e-2; full-range overshoot tau {full_tau:.2}",
        metrics[0].oscillations,
        metrics[metrics.len() - 1].oscillations,
        overshoots[0],
        overshoots[2]
    ))
}

fn numerical_kernels(plant: &MicrogridPlant) -> Outcome {
    let mut worst_semigroup: f64 = 0.0;
    for sub in plant.continuous.subsystems() {
        let ts = plant.config.sampling_time;
        let (a1, _) = matrix_exponential_pair(&sub.a, &sub.b, ts).map_err(fmt_err)?;
        let (a2, _) = matrix_exponential_pair(&sub.a, &sub.b, 2.0 * ts).map_err(fmt_err)?;
        let rel = (&a2 - &a1 * &a1).norm() / a2.norm();
        worst_semigroup = worst_semigroup.max(rel);
    }
    let g = plant.continuous.assemble(None).map_err(fmt_err)?;
    let e1 = matrix_exponential(&(&g.a * 1e-3)).map_err(fmt_err)?;
    let e2 = matrix_exponential(&(&g.a * 2e-3)).map_err(fmt_err)?;
    worst_semigroup = worst_semigroup.max((&e2 - &e1 * &e1).norm() / e2.norm());
    ensure(worst_semigroup <= SEMIGROUP_TOL, format!("semigroup error {worst_semigroup:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_row: f64 = 0.0;
    let mut graphs = vec![plant.continuous.graph().clone()];
    for _ in 0..50 {
        let n = rng.random_range(2..10);
        // Every edge has a reverse edge; the two weights are independent.
        let mut edges = Vec::new();
        for from in 0..n {
            for to in from + 1..n {
                if rng.random_bool(0.4) {
                    edges.push(Edge { from, to, weight: rng.random_range(0.0..10.0) });
                    edges.push(Edge { from: to, to: from, weight: rng.random_range(0.0..10.0) });
                }
            }
        }
        if let Ok(graph) = CouplingGraph::new(n, &edges) {
            graphs.push(graph);
        }
    }
    for graph in &graphs {
        let l = build_laplacian(graph);
        for row in l.row_iter() {
            worst_row = worst_row.max(row.sum().abs());
        }
    }
    ensure(worst_row <= ROW_SUM_TOL, format!("Laplacian row sum {worst_row:e}"))?;

    let pattern = structure_pattern(&plant.continuous).map_err(fmt_err)?;
    let dense = DMatrix::from_fn(pattern.a.nrows(), pattern.a.ncols(), |_, _| rng.random_range(-1.0..1.0));
    let once = truncate(&dense, &pattern.a);
    ensure(truncate(&once, &pattern.a) == once, "truncation is not idempotent")?;
    ensure(truncate(&plant.exact.a, &pattern.a) == truncate(&truncate(&plant.exact.a, &pattern.a), &pattern.a), "truncation of A_d is not idempotent")?;
    Ok(format!("semigroup {worst_semigroup:.1e}; row sums {worst_row:.1e} over {} reciprocal graphs; truncation idempotent", graphs.len()))
}

fn main() -> ExitCode {
    let plant = plant();
    let criteria: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("discretization ordering", &|| discretization_ordering(&plant)),
        ("synthesis feasibility", &|| synthesis_feasibility(&plant)),
        ("certificate validity", &|| certificate_validity(&plant)),
        ("map and derivation consistency", &map_consistency),
        ("Riccati oracle", &|| riccati(&plant)),
        ("closed-loop convergence", &|| convergence(&plant)),
        ("Monte Carlo ordering", &|| monte_carlo_ordering(&plant)),
        ("eps0 sweep", &|| eps0_trend(&plant)),
        ("numerical kernels", &|| numerical_kernels(&plant)),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}) [{secs:.1} s]: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}) [{secs:.1} s]: {why}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
