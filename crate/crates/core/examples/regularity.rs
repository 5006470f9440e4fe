//! Solve the generalized Riccati equation for each bundled problem and print
//! how regular it is: range inclusion, PSD of R̂, and the gain's L² norm.

use regime_lq::oracle::{classical_spec, modulated_homogeneous_spec, scalar_classical_spec};
use regime_lq::riccati::{regularity_report, solve_gre};
use regime_lq::TimeGrid;

fn main() -> regime_lq::Result<()> {
    let grid = TimeGrid::new(0.0, 1.0, 1000)?;
    let problems = [
        ("modulated, D ≠ 0", modulated_homogeneous_spec()),
        ("scalar classical", scalar_classical_spec()),
        ("identity weights, n = m = 3", classical_spec(3, 3)),
    ];
    println!(
        "{:<28} {:>14} {:>10} {:>12} {:>10} {:>12}",
        "problem", "class", "range res", "min eig R̂", "‖gain‖²", "L² flag"
    );
    for (name, spec) in problems {
        let sol = solve_gre(&spec, &grid)?;
        let rep = regularity_report(&sol, &spec, 1e-8);
        println!(
            "{:<28} {:>14} {:>10.1e} {:>12.4} {:>10.4} {:>12}",
            name,
            format!("{:?}", rep.classification),
            rep.range_residual,
            rep.min_eigenvalue,
            rep.l2_estimate,
            format!("{:?}", rep.l2_flag)
        );
    }
    Ok(())
}
