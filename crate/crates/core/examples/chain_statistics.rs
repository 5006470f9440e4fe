//! Sample a three-regime chain and compare the empirical regime distribution
//! at a few times with the matrix exponential.
//!
//! ```text
//! cargo run --release --example chain_statistics -- [paths]
//! ```

use regime_lq::chain::{occupancy_reference, simulate_chain, Generator};

fn main() -> regime_lq::Result<()> {
    let paths: u64 = std::env::args().nth(1).map_or(20_000, |s| s.parse().expect("paths"));
    let gen = Generator::from_rows(&[&[-2.0, 1.5, 0.5], &[0.3, -0.8, 0.5], &[1.0, 1.0, -2.0]])?;
    let chains: Vec<_> = (0..paths).map(|p| simulate_chain(&gen, 0.0, 0, 2.0, p)).collect::<Result<_, _>>()?;
    let jumps: usize = chains.iter().map(|c| c.num_jumps()).sum();
    println!("{paths} paths, {:.3} jumps per path", jumps as f64 / paths as f64);
    for t in [0.25, 0.5, 1.0, 2.0] {
        let mut counts = [0usize; 3];
        for c in &chains {
            counts[c.regime_at(t)] += 1;
        }
        let exact = occupancy_reference(&gen, 0.0, 0, t)?;
        let emp: Vec<String> = counts.iter().map(|&c| format!("{:.4}", c as f64 / paths as f64)).collect();
        let ex: Vec<String> = exact.iter().map(|p| format!("{p:.4}")).collect();
        println!("t = {t:<4}  empirical [{}]  exact [{}]", emp.join(", "), ex.join(", "));
    }
    Ok(())
}
