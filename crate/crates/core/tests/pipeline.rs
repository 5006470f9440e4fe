//! End-to-end runs on small ensembles: solver → strategy → simulation → sweep.

use nalgebra::DVector;
use regime_lq::bsde::{solve_adjoint_ode, solve_adjoint_regression, DEFAULT_DEGREE};
use regime_lq::control::build_strategy;
use regime_lq::oracle::{anti_convex_spec, modulated_drift_spec, modulated_homogeneous_spec, scalar_classical_spec};
use regime_lq::riccati::solve_perturbed;
use regime_lq::sim::{estimate_cost, generate_scenarios, simulate_closed_loop, simulate_open_loop};
use regime_lq::sweep::{convexity_probe, run_sweep, value_gap, verify_feedback_identity, SweepOptions, Verdict};
use regime_lq::TimeGrid;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn uncontrolled_state_is_the_modulator() {
    // with u = 0: dX = −αX ds + √(2α) X dW, so X = x·M; Euler converges with strong order ½
    let spec = modulated_homogeneous_spec();
    let carrier = modulated_drift_spec();
    let error_at_one = |steps: usize| {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let sc = generate_scenarios(&carrier, &grid, 1000, 2, 0).unwrap();
        let zero = vec![vec![DVector::zeros(1); grid.len()]; sc.count];
        let ens = simulate_open_loop(&spec, &DVector::from_element(1, 2.0), &zero, &sc).unwrap();
        median(
            (0..sc.count)
                .map(|p| (ens.x[p][steps][0] / (2.0 * sc.modulator(p, steps)) - 1.0).abs())
                .collect(),
        )
    };
    let (coarse, fine) = (error_at_one(250), error_at_one(2000));
    assert!(fine < 0.05, "{fine}");
    assert!(coarse / fine > 2.0, "{coarse} vs {fine}");
}

#[test]
fn perturbed_closed_loop_follows_the_closed_form() {
    let spec = modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let sc = generate_scenarios(&spec, &grid, 2000, 8, 0).unwrap();
    let eps = 0.5;
    let ric = solve_perturbed(&spec, eps, &grid).unwrap();
    let adj = solve_adjoint_regression(&spec, &ric, &sc, DEFAULT_DEGREE).unwrap();
    let strategy = build_strategy(&ric, &adj, &spec).unwrap();
    let ens = simulate_closed_loop(&spec, &DVector::from_element(1, 1.0), &strategy, &sc).unwrap();
    // u_ε = −3M/(ε + 1) and X_ε = M((ε + 1 − s)·3/(ε + 1) − 2√(1 − s)) from x = 1
    for k in [0, 300, 700] {
        let s = grid.node(k);
        let u_err = (0..sc.count)
            .map(|p| (ens.u[p][k][0] / (-3.0 * sc.modulator(p, k) / (eps + 1.0)) - 1.0).abs())
            .collect();
        assert!(median(u_err) < 0.03, "u at s = {s}");
        let x_err = (0..sc.count)
            .map(|p| {
                let want = sc.modulator(p, k) * ((eps + 1.0 - s) * 3.0 / (eps + 1.0) - 2.0 * (1.0 - s).sqrt());
                (ens.x[p][k][0] - want).abs() / sc.modulator(p, k)
            })
            .collect();
        assert!(median(x_err) < 0.03, "x at s = {s}");
    }
    let cost = estimate_cost(&spec, &ens, eps, Some(&sc)).unwrap();
    assert!(cost.control_l2 > 0.0 && cost.mean.is_finite());
}

#[test]
fn classical_sweep_converges_to_unit_gain() {
    let spec = scalar_classical_spec();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let sc = generate_scenarios(&spec, &grid, 500, 4, 0).unwrap();
    let report = run_sweep(
        &spec,
        &DVector::from_element(1, 1.0),
        &[0.2, 0.1, 0.05, 0.02],
        &sc,
        0.9,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.verdict, Verdict::Solvable);
    let limit = report.limit.as_ref().unwrap();
    for k in 0..=report.t_prime_index() {
        for i in 0..2 {
            // Ṗ = P²/(1 + ε), P(1) = 1, so Θ_ε = −1/(1 + ε + 1 − s) → −1/(2 − s)
            let th = limit.theta(k, i)[(0, 0)];
            assert!((th + 1.0 / (2.0 - grid.node(k))).abs() < 1e-6, "node {k}: {th}");
        }
    }
    // deterministic problem: the offsets vanish and the norm grows as ε shrinks
    let l2: Vec<f64> = report.records.iter().map(|r| r.control_l2.unwrap()).collect();
    assert!(l2.windows(2).all(|w| w[1] > w[0]));
    let fb = verify_feedback_identity(&spec, &report, limit, &sc).unwrap();
    assert!(fb.residual < 1e-6, "{}", fb.residual);
    let gap = value_gap(&report).unwrap();
    assert!(gap.monotone);
}

#[test]
fn modulated_sweep_on_a_small_ensemble() {
    let spec = modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, 250).unwrap();
    let sc = generate_scenarios(&spec, &grid, 1000, 6, 0).unwrap();
    let report = run_sweep(
        &spec,
        &DVector::from_element(1, 1.0),
        &[0.2, 0.1, 0.02, 0.01],
        &sc,
        0.9,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.verdict, Verdict::Solvable);
    // the closest pair of ε has the closest controls
    let d = |a: usize, b: usize| report.cauchy_u[a][b].unwrap();
    assert!(d(2, 3) < d(1, 2) && d(2, 3) < d(0, 1) && d(1, 2) < d(0, 2));
    assert!(d(0, 1) == d(1, 0) && d(2, 2) == 0.0);
    let limit = report.limit.as_ref().unwrap();
    let fb = verify_feedback_identity(&spec, &report, limit, &sc).unwrap();
    assert!(
        fb.residual <= (3.0 * fb.residual_se).max(10.0 * 0.01f64.powi(2)),
        "{} ± {}",
        fb.residual,
        fb.residual_se
    );
}

#[test]
fn anti_convex_problem_is_flagged() {
    let spec = anti_convex_spec();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let sc = generate_scenarios(&spec, &grid, 500, 1, 0).unwrap();
    let report = run_sweep(
        &spec,
        &DVector::from_element(1, 1.0),
        &[2.0, 1.5, 0.5, 0.1],
        &sc,
        0.9,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.verdict, Verdict::NotSolvable);
    assert!(report.records[0].escape_time.is_none());
    assert!(report.records[3].escape_time.is_some());
    assert!(report.limit.is_none());

    let probe = convexity_probe(&spec, &sc, 12, 9).unwrap();
    assert!(probe.negative && probe.minimum < 0.0);
    let classical = scalar_classical_spec();
    let probe = convexity_probe(&classical, &generate_scenarios(&classical, &grid, 500, 1, 0).unwrap(), 12, 9).unwrap();
    assert!(!probe.negative && probe.minimum > 0.0);
}

#[test]
fn ode_backend_strategy_has_zero_offset_on_homogeneous_problems() {
    let spec = modulated_homogeneous_spec();
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let ric = solve_perturbed(&spec, 0.1, &grid).unwrap();
    let strategy = build_strategy(&ric, &solve_adjoint_ode(&spec, &ric).unwrap(), &spec).unwrap();
    for k in 0..grid.len() {
        for i in 0..2 {
            assert_eq!(strategy.offset.eval(k, i, 1.0)[0], 0.0);
        }
    }
}
