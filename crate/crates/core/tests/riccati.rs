use regime_lq::oracle::{self, ModulatedDrift};
use regime_lq::riccati::{regularity_report, solve_gre, solve_perturbed, Classification};
use regime_lq::TimeGrid;

#[test]
fn modulated_drift_perturbed_matches_closed_form() {
    let spec = oracle::modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, 2000).unwrap();
    for eps in [1.0, 0.1, 0.01, 0.001] {
        let t = std::time::Instant::now();
        let sol = solve_perturbed(&spec, eps, &grid).unwrap();
        let mut err = 0.0f64;
        for k in 0..grid.len() {
            for i in 0..2 {
                err = err.max((sol.p[k][i][(0, 0)] - ModulatedDrift.p_eps(eps, grid.node(k))).abs());
            }
        }
        eprintln!("eps {eps}: max err {err:e} in {:?}", t.elapsed());
        assert!(err < 1e-6);
    }
}

#[test]
fn example_gre_is_identity_and_not_regular() {
    let spec = oracle::modulated_homogeneous_spec();
    let grid = TimeGrid::new(0.0, 1.0, 2000).unwrap();
    let sol = solve_gre(&spec, &grid).unwrap();
    let err = sol.p.iter().flatten().map(|p| (p[(0, 0)] - 1.0).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8);
    let rep = regularity_report(&sol, &spec, 1e-8);
    assert_eq!(rep.classification, Classification::NotRegular);
    assert!(rep.range_residual >= 0.5);
}
