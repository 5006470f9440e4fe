use nalgebra::DVector;
use regime_lq::bsde::{bsde_residual, solve_adjoint_ode, solve_adjoint_regression, DEFAULT_DEGREE};
use regime_lq::oracle::{default_generator, modulated_drift_spec};
use regime_lq::problem::{Input, MatrixProvider, ProblemSpec, Profile};
use regime_lq::riccati::solve_perturbed;
use regime_lq::sim::generate_scenarios;
use regime_lq::{Error, TimeGrid};

// η_ε(s) = ε/(ε + 1 − s) · M(s) · 2√(1 − s) for the modulated example
fn eta_exact(eps: f64, s: f64, m: f64) -> f64 {
    eps / (eps + 1.0 - s) * m * 2.0 * (1.0 - s).sqrt()
}

/// Scalar two-regime problem with time-varying deterministic inputs.
fn deterministic_spec() -> ProblemSpec {
    let mut spec = ProblemSpec::zero(1, 1, default_generator(), 1.0);
    spec.a = MatrixProvider::scalars(&[-1.0, 0.5]);
    spec.b = MatrixProvider::scalars(&[1.0, 1.0]);
    spec.c = MatrixProvider::scalars(&[0.3, 0.6]);
    spec.q_mat = MatrixProvider::scalars(&[1.0, 2.0]);
    spec.r_mat = MatrixProvider::scalars(&[1.0, 1.0]);
    spec.g_mat = vec![nalgebra::DMatrix::from_element(1, 1, 1.0); 2];
    spec.g_vec = vec![DVector::from_element(1, 0.5), DVector::from_element(1, -0.5)];
    spec.drift = Input::Profiled {
        profile: Profile::Polynomial(vec![1.0, 2.0, -1.0]),
        direction: vec![DVector::from_element(1, 1.0), DVector::from_element(1, 0.5)],
    };
    spec.sigma = Input::Profiled {
        profile: Profile::Constant(0.2),
        direction: vec![DVector::from_element(1, 1.0); 2],
    };
    spec
}

#[test]
fn ode_residual_is_high_order() {
    let spec = deterministic_spec();
    let residual = |steps: usize| {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let ric = solve_perturbed(&spec, 0.1, &grid).unwrap();
        let sol = solve_adjoint_ode(&spec, &ric).unwrap();
        bsde_residual(&sol, &spec, &ric, None).unwrap()
    };
    let (r1, r2, r3) = (residual(25), residual(50), residual(100));
    assert!(r1 / r2 > 8.0 && r2 / r3 > 8.0, "{r1:e} {r2:e} {r3:e}");
}

#[test]
fn ode_eta_converges_under_refinement() {
    let spec = deterministic_spec();
    let eta0 = |steps: usize| {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let ric = solve_perturbed(&spec, 0.1, &grid).unwrap();
        solve_adjoint_ode(&spec, &ric).unwrap().eta(0, 0, 1.0)[0]
    };
    let (a, b, c) = (eta0(50), eta0(100), eta0(200));
    assert!((a - b).abs() > 10.0 * (b - c).abs(), "{a} {b} {c}");
}

#[test]
fn regression_agrees_with_ode_without_modulator() {
    let spec = deterministic_spec();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let ric = solve_perturbed(&spec, 0.1, &grid).unwrap();
    let ode = solve_adjoint_ode(&spec, &ric).unwrap();
    let scenarios = generate_scenarios(&spec, &grid, 4000, 11, 0).unwrap();
    let reg = solve_adjoint_regression(&spec, &ric, &scenarios, DEFAULT_DEGREE).unwrap();
    for k in [0, 50, 100, 150, 199] {
        // a regime nobody visits at a node only gets the pooled fallback
        for i in (0..2).filter(|&i| (0..scenarios.count).any(|p| scenarios.regime(p, k) == i)) {
            let (a, b) = (ode.eta(k, i, 1.0)[0], reg.eta(k, i, 1.0)[0]);
            assert!((a - b).abs() < 5e-3, "k = {k}, i = {i}: {a} vs {b}");
        }
    }
}

#[test]
fn regression_tracks_closed_form_along_paths() {
    let spec = modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let scenarios = generate_scenarios(&spec, &grid, 4000, 5, 0).unwrap();
    for eps in [1.0, 0.1] {
        let ric = solve_perturbed(&spec, eps, &grid).unwrap();
        let sol = solve_adjoint_regression(&spec, &ric, &scenarios, DEFAULT_DEGREE).unwrap();
        for k in [20, 100, 160] {
            let s = grid.node(k);
            let mut errs: Vec<f64> = (0..scenarios.count)
                .map(|p| {
                    let m = scenarios.modulator(p, k);
                    let want = eta_exact(eps, s, m);
                    (sol.eta(k, scenarios.regime(p, k), m)[0] - want).abs() / want.abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            let p90 = errs[errs.len() * 9 / 10];
            assert!(p90 < 0.1, "eps = {eps}, s = {s}: p90 relative error {p90}");
        }
        let d = sol.diagnostics.as_ref().unwrap();
        let want = eta_exact(eps, 0.0, 1.0);
        assert!(
            (d.eta0_forward[0] - want).abs() <= 3.0 * d.eta0_forward_se[0] + 0.02 * want,
            "eps = {eps}: {} ± {}",
            d.eta0_forward[0],
            d.eta0_forward_se[0]
        );
    }
}

#[test]
fn regression_input_checks() {
    let spec = modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let ric = solve_perturbed(&spec, 0.5, &grid).unwrap();
    let few = generate_scenarios(&spec, &grid, 10, 1, 0).unwrap();
    assert!(matches!(solve_adjoint_regression(&spec, &ric, &few, 2), Err(Error::Config(_))));
    let other = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let wrong_grid = generate_scenarios(&spec, &other, 200, 1, 0).unwrap();
    assert!(matches!(
        solve_adjoint_regression(&spec, &ric, &wrong_grid, 2),
        Err(Error::Mismatch(_))
    ));
    let plain = generate_scenarios(&deterministic_spec(), &grid, 200, 1, 0).unwrap();
    assert!(matches!(solve_adjoint_regression(&spec, &ric, &plain, 2), Err(Error::Mismatch(_))));
}
