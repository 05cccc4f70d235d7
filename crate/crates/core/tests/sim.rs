mod common;

use mmlqg::sim::*;
use mmlqg::*;
use nalgebra::DMatrix;
use std::sync::OnceLock;

fn scenario_eq() -> &'static (GameParameters64, Equilibrium64) {
    static EQ: OnceLock<(GameParameters64, Equilibrium64)> = OnceLock::new();
    EQ.get_or_init(|| {
        let p = GameParameters64::reference_scenario();
        let sol = solve_fixed_point(&p, &FixedPointOptions::default(), None).unwrap();
        let eq = Equilibrium::prepare(&p, &sol, 0.01, 25.0, false).unwrap();
        (p, eq)
    })
}

fn short_eq(p: &GameParameters64, horizon: f64) -> Equilibrium64 {
    let sol = solve_fixed_point(p, &FixedPointOptions::default(), None).unwrap();
    Equilibrium::prepare(p, &sol, 0.01, horizon, false).unwrap()
}

fn silent_scenario() -> GameParameters64 {
    let mut p = GameParameters64::reference_scenario();
    p.d0.fill(0.0);
    p.d.fill(0.0);
    p.sigma_v0.fill(0.0);
    p.sigma_v.fill(0.0);
    p.eta0.fill(0.0);
    p.eta.fill(0.0);
    p
}

#[test]
fn same_seed_same_run() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 20, PopulationMode::Proportional, 0).unwrap();
    let a = simulate(eq, &pop, 11, 3, None).unwrap();
    let b = simulate(eq, &pop, 11, 3, None).unwrap();
    assert_eq!(a, b);
    let c = simulate(eq, &pop, 12, 3, None).unwrap();
    assert_ne!(a.x0, c.x0);
    let d = simulate(eq, &pop, 11, 4, None).unwrap();
    assert_ne!(a.x0, d.x0);
    let ca = path_costs(eq, &pop, 11, 3, None).unwrap();
    let cb = path_costs(eq, &pop, 11, 3, None).unwrap();
    assert_eq!(ca.minors, cb.minors);
    assert_eq!(ca.major, cb.major);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 10, PopulationMode::Proportional, 0).unwrap();
    let family = deviation_family::<f64>(0, &[0.5, 1.5], &[0.1]);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_nash_gap(eq, &pop, &family, 6, 5).unwrap())
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn growing_the_population_keeps_existing_agent_noise() {
    let (p, eq) = scenario_eq();
    let small = generate_population(p, 5, PopulationMode::Proportional, 0).unwrap();
    let large = generate_population(p, 8, PopulationMode::Proportional, 0).unwrap();
    let a = simulate(eq, &small, 1, 0, None).unwrap();
    let b = simulate(eq, &large, 1, 0, None).unwrap();
    // The first innovation of an agent depends only on its own noise and
    // the common initial state.
    let first_a = &a.dnu[0];
    let first_b = &b.dnu[0];
    for i in 0..5 {
        assert_eq!(first_a.column(i), first_b.column(i));
    }
}

#[test]
fn controls_are_driven_by_observations_only() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 10, PopulationMode::Proportional, 0).unwrap();
    let run = simulate(eq, &pop, 21, 0, None).unwrap();
    let dt = eq.dt;
    let minor_obs = &eq.minors[0].observation;
    let major_obs = &eq.major.observation;
    let mut bank = ControllerBank::new(eq, &pop, None).unwrap();
    for step in 0..eq.steps {
        let (u0, u) = bank.controls();
        assert!((&u0 - &run.u0[step]).amax() < 1e-12, "major control at step {step}");
        assert!((&u[0] - &run.u[step]).amax() < 1e-12, "minor controls at step {step}");
        // Observation increments reconstructed from recorded innovations
        // and estimates; no true state is available to the bank.
        let dy0 = &run.dnu0[step] + major_obs * &run.z0[step] * dt;
        let dy = &run.dnu[step] + minor_obs * &run.z[step] * dt;
        bank.update(step, &dy0, &[dy], &u0, &u);
    }
    let law = &eq.minor_laws[0];
    for step in [0, 100, eq.steps] {
        assert!((law.apply_batch(&run.z[step]) - &run.u[step]).amax() < 1e-15);
        assert!((eq.major_law.apply(&run.z0[step]) - &run.u0[step]).amax() < 1e-15);
    }
}

#[test]
fn silent_zero_game_stays_at_zero() {
    let p = silent_scenario();
    let eq = short_eq(&p, 2.0);
    let pop = generate_population(&p, 6, PopulationMode::Proportional, 0).unwrap();
    let run = simulate(&eq, &pop, 3, 0, None).unwrap();
    for s in 0..run.len() {
        assert_eq!(run.x0[s].amax(), 0.0);
        assert_eq!(run.z0[s].amax(), 0.0);
        assert_eq!(run.u0[s].amax(), 0.0);
        assert_eq!(run.x[s].amax(), 0.0);
        assert_eq!(run.z[s].amax(), 0.0);
        assert_eq!(run.u[s].amax(), 0.0);
        assert_eq!(run.minor_errors[s].amax(), 0.0);
    }
    for agent in [AgentId::Major, AgentId::Minor(2)] {
        assert_eq!(evaluate_cost(&run, agent, &p).unwrap().value, 0.0);
    }
    let st = stability_metrics(&run, p.rho);
    assert!(st.envelope.iter().all(|&e| e == 0.0));
    let en = estimate_en_limit(&eq, &pop, 2, 0).unwrap();
    assert_eq!(en.monte_carlo.mean, 0.0);
    assert_eq!(en.deterministic, 0.0);
}

#[test]
fn scenario_major_error_decays_from_a_random_start() {
    let mut p = GameParameters64::reference_scenario();
    p.sigma_init = DMatrix::identity(2, 2) * 0.01;
    // Keeps the initial filter gain times the step well below one.
    p.sigma_v0 = DMatrix::identity(2, 2) * 0.05;
    p.sigma_v = DMatrix::identity(4, 4) * 0.05;
    let eq = short_eq(&p, 6.0);
    let pop = generate_population(&p, 100, PopulationMode::Proportional, 0).unwrap();
    let rms = |step: usize, runs: &[SimulationRun64]| {
        (runs.iter().map(|r| r.major_errors[step].rows(0, 2).norm_squared()).sum::<f64>() / runs.len() as f64).sqrt()
    };
    let runs = run_paths(8, |path| simulate(&eq, &pop, 4, path, None)).unwrap();
    assert!(runs.iter().all(|r| r.is_complete() && r.len() == 601));
    assert!(rms(0, &runs) > 0.05);
    assert!(rms(500, &runs) < 0.1 * rms(0, &runs));
}

#[test]
fn costs_require_complete_runs() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 3, PopulationMode::Proportional, 0).unwrap();
    let run = simulate(eq, &pop, 1, 0, None).unwrap();
    assert!(evaluate_cost(&run, AgentId::Minor(3), p).is_err());
    let mut cut = run.clone();
    cut.u.pop();
    assert!(matches!(evaluate_cost(&cut, AgentId::Major, p), Err(MfgError::IncompleteTrajectory(_))));
    let full = evaluate_cost(&run, AgentId::Minor(1), p).unwrap();
    let streamed = path_costs(eq, &pop, 1, 0, None).unwrap();
    assert!((full.value - streamed.minors[1]).abs() < 1e-12 * full.value.abs().max(1.0));
    assert!(((evaluate_cost(&run, AgentId::Major, p).unwrap().value) - streamed.major).abs() < 1e-12);
    assert!((-p.rho * 25.0f64).exp() < 2e-10);
    assert!(full.tail_bound < 1e-8);
}

#[test]
fn tracking_a_consistent_target_costs_nothing() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 2, PopulationMode::Proportional, 0).unwrap();
    let mut run = simulate(eq, &pop, 1, 0, None).unwrap();
    // x0 ≡ H0·x^(N) + η0 with zero control.
    for s in 0..run.len() {
        run.x0[s] = &p.h0 * &run.xn[s] + &p.eta0;
        run.u0[s].fill(0.0);
    }
    assert!(evaluate_cost(&run, AgentId::Major, p).unwrap().value.abs() < 1e-24);
}

#[test]
fn blowup_reports_step_and_agent() {
    let (p, eq) = scenario_eq();
    let mut bad = eq.clone();
    bad.params.a0 = DMatrix::identity(2, 2) * 50.0;
    let mut q = p.clone();
    q.sigma_init = DMatrix::identity(2, 2);
    bad.params.sigma_init = q.sigma_init.clone();
    let pop = generate_population(p, 3, PopulationMode::Proportional, 0).unwrap();
    match simulate(&bad, &pop, 1, 0, None) {
        Err(MfgError::NumericalBlowup { step, agent, .. }) => {
            assert!(step > 0 && step <= bad.steps);
            assert_eq!(agent, "major");
        }
        other => panic!("expected blowup, got {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn sampled_types_concentrate() {
    let p = common::random_game(3, 2, 2);
    let mut p = p;
    p.pi = vec![0.3, 0.7];
    for seed in [0, 1, 99] {
        let pop = generate_population(&p, 10_000, PopulationMode::Sampled, seed).unwrap();
        assert!((pop.empirical_pi[0] - 0.3).abs() < 0.02);
        assert!((pop.empirical_pi[1] - 0.7).abs() < 0.02);
        assert!((pop.empirical_pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    p.pi = vec![0.5, 0.5];
    let pop = generate_population(&p, 4, PopulationMode::Proportional, 0).unwrap();
    assert_eq!(pop.members(0).len(), 2);
    assert_eq!(pop.members(1).len(), 2);
    let single = GameParameters64::reference_scenario();
    for mode in [PopulationMode::Sampled, PopulationMode::Proportional] {
        let pop = generate_population(&single, 17, mode, 5).unwrap();
        assert!(pop.type_of.iter().all(|&k| k == 0));
    }
}

#[test]
fn identity_deviation_has_zero_gap() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 5, PopulationMode::Proportional, 0).unwrap();
    let fam = vec![Deviation { agent: 2, gain_scale: 1.0, offset_shift: 0.0 }];
    let rep = estimate_nash_gap(eq, &pop, &fam, 4, 0).unwrap();
    assert_eq!(rep.gaps[0].gap.mean, 0.0);
    assert_eq!(rep.epsilon_hat, 0.0);
    // Running the identity through the deviation path gives the same costs.
    let a = path_costs(eq, &pop, 0, 1, Some(&fam[0])).unwrap();
    let b = path_costs(eq, &pop, 0, 1, None).unwrap();
    assert_eq!(a.minors, b.minors);
}

#[test]
fn decoupled_game_has_no_profitable_deviation() {
    let mut p = GameParameters64::reference_scenario();
    p.g.fill(0.0);
    p.h0.fill(0.0);
    p.h1.fill(0.0);
    p.h2.fill(0.0);
    let eq = short_eq(&p, 10.0);
    let pop = generate_population(&p, 5, PopulationMode::Proportional, 0).unwrap();
    let fam = deviation_family::<f64>(0, &[0.5, 0.9, 1.1, 1.5], &[-0.05, 0.05]);
    let rep = estimate_nash_gap(&eq, &pop, &fam, 40, 2).unwrap();
    for g in &rep.gaps {
        assert!(g.gap.mean >= -2.0 * g.gap.se, "{}: {} ± {}", g.description, g.gap.mean, g.gap.se);
    }
}

#[test]
fn stability_envelope_grows_with_noise() {
    let p = GameParameters64::reference_scenario();
    let mut loud = p.clone();
    loud.d0 *= 2.0;
    loud.d *= 2.0;
    loud.sigma_v0 *= 2.0;
    loud.sigma_v *= 2.0;
    let quiet_eq = short_eq(&p, 5.0);
    let loud_eq = short_eq(&loud, 5.0);
    let pop = generate_population(&p, 10, PopulationMode::Proportional, 0).unwrap();
    let a = stability_monte_carlo(&quiet_eq, &pop, 10, 7, 4.0).unwrap();
    let b = stability_monte_carlo(&loud_eq, &pop, 10, 7, 4.0).unwrap();
    assert!(a.finite && b.finite);
    assert!(b.supremum > a.supremum);
}

#[test]
fn envelope_statistics() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64).collect();
    let moments: Vec<f64> = grid.iter().map(|t| (0.5 * t).exp()).collect();
    let rep = stability_from_moments(&grid, &moments, 1.0, 8.0);
    assert!(rep.envelope.iter().all(|e| (e - 1.0).abs() < 1e-12));
    assert!(rep.finite);
    let rising: Vec<f64> = grid.iter().map(|t| (t).exp()).collect();
    let rep = stability_from_moments(&grid, &rising, 1.0, 8.0);
    assert!(!rep.non_growing_tail);
    assert_eq!(rep.argmax_t, 10.0);
}

#[test]
fn mean_field_gap_shrinks_with_population() {
    let (p, eq) = scenario_eq();
    let small = generate_population(p, 5, PopulationMode::Proportional, 0).unwrap();
    let large = generate_population(p, 80, PopulationMode::Proportional, 0).unwrap();
    let a = mean_field_gap(eq, &small, 6, 1).unwrap();
    let b = mean_field_gap(eq, &large, 6, 1).unwrap();
    assert!(b.mean < a.mean, "{} vs {}", b.mean, a.mean);
}

#[test]
fn separated_cost_matches_covariance_integral_in_order_of_magnitude() {
    let (p, eq) = scenario_eq();
    let pop = generate_population(p, 50, PopulationMode::Proportional, 0).unwrap();
    let rep = estimate_en_limit(eq, &pop, 4, 3).unwrap();
    assert!(rep.deterministic > 0.0);
    assert!(rep.relative_deviation < 0.5, "{rep:?}");
}

#[test]
fn population_lookup() {
    let pop = Population::from_types(vec![1, 0, 1, 1], 2).unwrap();
    assert_eq!(pop.members(0), &[1]);
    assert_eq!(pop.members(1), &[0, 2, 3]);
    assert_eq!(pop.locate(3), Some((1, 2)));
    assert_eq!(pop.locate(4), None);
    assert!((pop.empirical_pi[1] - 0.75).abs() < 1e-15);
    assert!(Population::from_types(vec![0, 2], 2).is_err());
}
