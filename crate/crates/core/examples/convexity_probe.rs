//! Estimate the homogeneous cost of random controls. A clearly negative value
//! means the problem is not convex and no ε-sweep can succeed.

use regime_lq::oracle::{anti_convex_spec, modulated_drift_spec, scalar_classical_spec};
use regime_lq::sim::generate_scenarios;
use regime_lq::sweep::convexity_probe;
use regime_lq::TimeGrid;

fn main() -> regime_lq::Result<()> {
    let grid = TimeGrid::new(0.0, 1.0, 200)?;
    for (name, spec) in [
        ("anti-convex", anti_convex_spec()),
        ("scalar classical", scalar_classical_spec()),
        ("modulated", modulated_drift_spec()),
    ] {
        let scenarios = generate_scenarios(&spec, &grid, 2000, 1, 0)?;
        let probe = convexity_probe(&spec, &scenarios, 16, 3)?;
        println!(
            "{name:<18} min J⁰ = {:>9.4} ± {:.4}  negative: {}",
            probe.minimum, probe.minimum_se, probe.negative
        );
    }
    Ok(())
}
