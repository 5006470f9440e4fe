//! Write the reference problems as JSON problem files and load them back.
//!
//! ```text
//! cargo run --example problem_files -- crates/core/problems
//! ```

use std::path::PathBuf;

use regime_lq::cli::builtin;
use regime_lq::problem::{load_file, save_file};

fn main() -> regime_lq::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "problems".into()));
    std::fs::create_dir_all(&dir)?;
    for name in ["modulated-homogeneous", "modulated-drift", "anti-convex", "scalar-classical"] {
        let spec = builtin(name).expect("known problem");
        let path = dir.join(format!("{name}.json"));
        save_file(&spec, &path)?;
        let back = load_file(&path)?;
        assert_eq!(back, spec, "{name} does not round-trip");
        println!("{}", path.display());
    }
    Ok(())
}
