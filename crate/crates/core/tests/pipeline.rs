use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use passivnet::certification::{check_global_stability_lmi, check_network_spectral_radius, verify, VerifyOptions};
use passivnet::config::Definition;
use passivnet::microgrid::{Line, MicrogridConfig, MicrogridPlant};
use passivnet::model::{CouplingGraph, DiscreteSubsystem, NetworkModel};
use passivnet::simulation::{
    lqr_baseline, monte_carlo, simulate, tracking_error, tracking_error_of_run, Controllers, MonteCarloOptions,
};
use passivnet::synthesis::{synthesize_all, synthesize_network, CostKind, SynthesisOptions};
use passivnet::Error;

fn plant() -> MicrogridPlant {
    MicrogridPlant::new(MicrogridConfig::default_six_dgu()).unwrap()
}

fn random_network(rng: &mut ChaCha8Rng) -> NetworkModel {
    let count = rng.random_range(2..=4);
    let u = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
    let subs = (0..count)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let (a, b, f, c) = (u(rng, n, n), u(rng, n, 1), u(rng, n, 1), u(rng, 1, n));
            DiscreteSubsystem::new(a, b, f, c).unwrap()
        })
        .collect();
    let pairs: Vec<_> = (1..count).map(|i| (i - 1, i, rng.random_range(0.01..0.5))).collect();
    NetworkModel::new(subs, CouplingGraph::undirected(count, &pairs).unwrap()).unwrap()
}

#[test]
fn default_config_is_feasible_for_every_cost() {
    let p = plant();
    let lqr = lqr_baseline(&p).unwrap();
    for cost in CostKind::ALL {
        let set = synthesize_network(&p.lm, cost, Some(&lqr), &SynthesisOptions::default()).unwrap();
        assert_eq!(set.certificates.len(), 6);
        let report = verify(&p.lm, &set.certificates, &set.options, &VerifyOptions { samples: 500, ..Default::default() }).unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn decoupled_form_implies_coupled_form_and_stability() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let options = SynthesisOptions::default();
    let mut checked = 0;
    for _ in 0..40 {
        let net = random_network(&mut rng);
        let Ok(set) = synthesize_network(&net, CostKind::Feasibility, None, &options) else { continue };
        let lmis = check_global_stability_lmi(&net, &set.certificates, options.eps0).unwrap();
        let (coupled, decoupled) = (&lmis[0], &lmis[1]);
        if decoupled.passed {
            assert!(coupled.passed, "{coupled:?}");
            assert!(check_network_spectral_radius(&net, &set.certificates).unwrap().passed);
            checked += 1;
        }
    }
    assert!(checked >= 5, "only {checked} fully feasible networks");
}

#[test]
fn max_dissipation_objective_does_not_exceed_feasible_trace() {
    let p = plant();
    let options = SynthesisOptions::default();
    let a = synthesize_network(&p.lm, CostKind::Feasibility, None, &options).unwrap();
    let b = synthesize_network(&p.lm, CostKind::MaxDissipation, None, &options).unwrap();
    for (ca, cb) in a.certificates.iter().zip(&b.certificates) {
        assert!(cb.objective <= ca.h.trace() * (1.0 + 1e-6), "{} > {}", cb.objective, ca.h.trace());
    }
}

#[test]
fn uncontrollable_unstable_subsystem_is_reported() {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let good = DiscreteSubsystem::new(s(0.5), s(1.0), s(0.1), s(1.0)).unwrap();
    let bad = DiscreteSubsystem::new(s(1.5), s(0.0), s(0.1), s(1.0)).unwrap();
    let net = NetworkModel::new(vec![good, bad], CouplingGraph::undirected(2, &[(0, 1, 0.1)]).unwrap()).unwrap();
    let results = synthesize_all(&net, CostKind::Feasibility, None, &SynthesisOptions::default()).unwrap();
    assert!(results[0].is_ok());
    assert!(matches!(results[1], Err(Error::Infeasible { subsystem: 1, .. })), "{:?}", results[1]);
}

#[test]
fn mimic_cost_requires_a_baseline() {
    let p = plant();
    assert!(matches!(
        synthesize_all(&p.lm, CostKind::MimicLqr, None, &SynthesisOptions::default()),
        Err(Error::MissingLqr)
    ));
}

#[test]
fn equilibrium_is_a_fixed_point_of_the_exact_loop() {
    let p = plant();
    let set = synthesize_network(&p.lm, CostKind::Feasibility, None, &SynthesisOptions::default()).unwrap();
    let gain = set.gain_matrix();
    let eq = p.equilibrium(&gain, &p.config.references(), &p.config.loads()).unwrap();
    let (a_cl, c) = p.closed_loop(&gain, &eq.u_f, &eq.s_f).unwrap();
    let next = &a_cl * &eq.x + c;
    assert!((&next - &eq.x).amax() <= 1e-9 * eq.x.amax().max(1.0));
    for i in 0..p.dgu_count() {
        assert!((eq.voltage(i) - p.config.references()[i]).abs() <= 1e-9);
    }
}

#[test]
fn feedforward_leaves_the_system_matrix_unchanged() {
    let p = plant();
    let gain = lqr_baseline(&p).unwrap().k;
    let (u_f, s_f) = p.feedforward(&gain, &p.config.references()).unwrap();
    let (with, _) = p.closed_loop(&gain, &u_f, &s_f).unwrap();
    let zero = DVector::zeros(p.dgu_count());
    let (without, c) = p.closed_loop(&gain, &zero, &zero).unwrap();
    assert_eq!(with, without);
    assert_eq!(c, DVector::zeros(p.n()));
}

#[test]
fn streamed_tracking_error_matches_stored_trajectory() {
    let p = plant();
    let gain = lqr_baseline(&p).unwrap().k;
    let refs = vec![50.02; 6];
    let loads = vec![3.0; 6];
    let x0 = p.equilibrium(&gain, &[50.0; 6], &p.config.loads()).unwrap().x;
    let traj = simulate(&p, &gain, &x0, &refs, &loads, 500).unwrap();
    let eq = p.equilibrium(&gain, &refs, &loads).unwrap();
    let stored = tracking_error(&traj, &eq);
    let streamed = tracking_error_of_run(&p, &gain, &x0, &refs, &loads, 500).unwrap();
    assert!((stored - streamed).abs() <= 1e-12 * stored);
}

/// Reorders DGUs by `perm` (new position `k` holds old DGU `perm[k]`).
fn permuted(config: &MicrogridConfig, perm: &[usize]) -> MicrogridConfig {
    let mut inv = vec![0; perm.len()];
    for (k, &old) in perm.iter().enumerate() {
        inv[old] = k;
    }
    let refs = config.references();
    MicrogridConfig {
        description: None,
        sampling_time: config.sampling_time,
        dgus: perm.iter().map(|&i| config.dgus[i].clone()).collect(),
        lines: config.lines.iter().map(|l| Line(inv[l.0 - 1] + 1, inv[l.1 - 1] + 1, l.2)).collect(),
        references: Some(perm.iter().map(|&i| refs[i]).collect()),
    }
}

#[test]
fn tracking_error_is_invariant_under_relabeling() {
    let original = plant();
    let perm = [3, 0, 5, 1, 4, 2];
    let relabeled = MicrogridPlant::new(permuted(&original.config, &perm)).unwrap();
    let error = |p: &MicrogridPlant, refs: &[f64], loads: &[f64]| {
        let gain = lqr_baseline(p).unwrap().k;
        let x0 = p.equilibrium(&gain, &[50.0; 6], &[5.0; 6]).unwrap().x;
        tracking_error_of_run(p, &gain, &x0, refs, loads, 2000).unwrap()
    };
    let refs = [49.97, 50.01, 50.04, 49.99, 50.0, 49.96];
    let loads = [2.5, 7.0, 4.0, 6.0, 3.3, 5.1];
    let e0 = error(&original, &refs, &loads);
    let refs_p: Vec<f64> = perm.iter().map(|&i| refs[i]).collect();
    let loads_p: Vec<f64> = perm.iter().map(|&i| loads[i]).collect();
    let e1 = error(&relabeled, &refs_p, &loads_p);
    assert!((e0 - e1).abs() <= 1e-6 * e0, "{e0} vs {e1}");
}

#[test]
fn monte_carlo_is_deterministic_per_seed() {
    let p = plant();
    let controllers = Controllers::synthesize(&p, &SynthesisOptions::default()).unwrap();
    let options = MonteCarloOptions { runs: 4, horizon: 500, ..Default::default() };
    let first = monte_carlo(&p, &controllers, &options).unwrap();
    let again = monte_carlo(&p, &controllers, &options).unwrap();
    assert_eq!(first, again);
    let other = monte_carlo(&p, &controllers, &MonteCarloOptions { seed: 1, ..options }).unwrap();
    assert_ne!(first.runs[0].references, other.runs[0].references);
    assert_eq!(first.runs.len(), 4);
    assert_eq!(first.summary.len(), 3);
}

#[test]
fn bundled_definition_matches_default_plant() {
    let def = Definition::default_microgrid().unwrap();
    let p = def.plant().unwrap();
    assert_eq!(p.lm, plant().lm);
    let json = serde_json::to_string(&p.config).unwrap();
    let back = Definition::from_json(&json).unwrap();
    assert_eq!(back.plant().unwrap().config, p.config);
}
