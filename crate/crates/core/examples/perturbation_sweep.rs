//! ε-sweep on the non-regular two-regime example: control norms against
//! `((x + 2)/(ε + 1))²`, the verdict, and the recovered limit strategy.
//!
//! ```text
//! cargo run --release --example perturbation_sweep -- [paths] [steps] [seed]
//! ```

use std::time::Instant;

use nalgebra::DVector;
use regime_lq::oracle::{modulated_drift_spec, ModulatedDrift};
use regime_lq::sim::generate_scenarios;
use regime_lq::sweep::{run_sweep, value_gap, verify_feedback_identity, SweepOptions, DEFAULT_LADDER};
use regime_lq::TimeGrid;

fn main() -> regime_lq::Result<()> {
    let mut args = std::env::args().skip(1);
    let paths: usize = args.next().map_or(10_000, |s| s.parse().expect("paths"));
    let steps: usize = args.next().map_or(1000, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let spec = modulated_drift_spec();
    let ex = ModulatedDrift;
    let grid = TimeGrid::new(0.0, 1.0, steps)?;
    let x0 = DVector::from_element(1, 1.0);
    let t_prime = 0.9;

    let clock = Instant::now();
    let scenarios = generate_scenarios(&spec, &grid, paths, seed, 0)?;
    let report = run_sweep(&spec, &x0, &DEFAULT_LADDER, &scenarios, t_prime, &SweepOptions::default())?;
    println!("sweep: {:.1} s, verdict {}", clock.elapsed().as_secs_f64(), report.verdict);

    println!(
        "{:>6} {:>9} {:>9} {:>7} {:>10} {:>10}",
        "eps", "E|u|^2", "exact", "z", "J_eps", "exact"
    );
    for r in &report.records {
        let (l2, se) = (r.control_l2.unwrap(), r.control_l2_se.unwrap());
        let exact = ex.control_l2(r.epsilon, 1.0);
        println!(
            "{:>6} {:>9.4} {:>9.4} {:>7.2} {:>10.5} {:>10.5}",
            r.epsilon,
            l2,
            exact,
            (l2 - exact) / se,
            r.value.unwrap(),
            ex.value_eps(r.epsilon, 1.0)
        );
    }

    if let (Some(limit), Some(summary)) = (&report.limit, &report.limit_summary) {
        let kp = report.t_prime_index();
        let worst = (0..=kp)
            .map(|k| (limit.theta(k, 0)[(0, 0)] - ex.theta_star(grid.node(k))).abs())
            .fold(0.0, f64::max);
        println!("max |Θ* − Θ*_exact| on [0, {t_prime}]: {worst:.2e}");
        println!(
            "v*(0) = {:.4} ± {:.4} (exact {})",
            summary.v0[0],
            summary.v0_se[0],
            ex.v_star(0.0, 1.0)
        );
        let clock = Instant::now();
        let fb = verify_feedback_identity(&spec, &report, limit, &scenarios)?;
        println!(
            "feedback residual {:.3e} ± {:.1e}, cost gap {:.2e} ({:.1} s)",
            fb.residual,
            fb.residual_se,
            fb.cost_gap,
            clock.elapsed().as_secs_f64()
        );
        let vg = value_gap(&report)?;
        println!(
            "V extrapolated {:.5} ± {:.5}, monotone {}",
            vg.extrapolated, vg.extrapolated_se, vg.monotone
        );
    }
    Ok(())
}
