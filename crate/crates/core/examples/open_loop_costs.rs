//! Open-loop costs on the homogeneous two-regime example: the Riccati
//! feedback `u ≡ 0` against the steering control `ū = −x M(s)` that drives
//! the state to zero at the horizon.
//!
//! ```text
//! cargo run --release --example open_loop_costs -- [paths] [steps] [seed]
//! ```

use nalgebra::DVector;
use regime_lq::oracle::{modulated_drift_spec, modulated_homogeneous_spec, ModulatedHomogeneous};
use regime_lq::riccati::solve_gre;
use regime_lq::sim::{estimate_cost, estimate_cost_cv, generate_scenarios, simulate_open_loop};
use regime_lq::TimeGrid;

fn main() -> regime_lq::Result<()> {
    let mut args = std::env::args().skip(1);
    let paths: usize = args.next().map_or(10_000, |s| s.parse().expect("paths"));
    let steps: usize = args.next().map_or(1000, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let spec = modulated_homogeneous_spec();
    // same chain and noise, plus the modulator M needed by ū
    let carrier = modulated_drift_spec();
    let grid = TimeGrid::new(0.0, 1.0, steps)?;
    let ex = ModulatedHomogeneous;
    // ⟨P X, X⟩ with the Riccati P is the cost-to-go of u ≡ 0: a near-perfect control variate
    let p = solve_gre(&spec, &grid)?;
    for regime in 0..2 {
        let scenarios = generate_scenarios(&carrier, &grid, paths, seed, regime)?;
        for x in [1.0, 2.0] {
            let x0 = DVector::from_element(1, x);
            let zero = vec![vec![DVector::zeros(1); grid.len()]; paths];
            let ens = simulate_open_loop(&spec, &x0, &zero, &scenarios)?;
            let j0 = estimate_cost(&spec, &ens, 0.0, None)?;
            let jcv = estimate_cost_cv(&spec, &ens, 0.0, &scenarios, &p)?;
            let u_bar: Vec<Vec<DVector<f64>>> = (0..paths)
                .map(|p| {
                    (0..grid.len())
                        .map(|k| DVector::from_element(1, ex.u_bar(x, 0.0, scenarios.modulator(p, k))))
                        .collect()
                })
                .collect();
            let ens = simulate_open_loop(&spec, &x0, &u_bar, &scenarios)?;
            let jb = estimate_cost(&spec, &ens, 0.0, None)?;
            println!(
                "regime {} x = {x}: J(0) = {:.4} ± {:.4}, with control variate {:.6} ± {:.1e} (x² = {}), J(ū) = {:.2e} ± {:.1e}",
                regime + 1,
                j0.mean,
                j0.std_error,
                jcv.mean,
                jcv.std_error,
                ex.cost_at_zero_control(x),
                jb.mean,
                jb.std_error
            );
        }
    }
    Ok(())
}
