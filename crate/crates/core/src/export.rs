//! CSV and JSON artifacts.
//!
//! Numbers are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64`; regimes are written 1-based.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::control::{Offset, Strategy};
use crate::error::Result;
use crate::riccati::RiccatiSolution;
use crate::sim::{CostEstimate, StateEnsemble};
use crate::sweep::SweepReport;

/// Paths written in full by [`write_ensemble`]; the rest only enter the node statistics.
pub const ENSEMBLE_SAMPLE_PATHS: usize = 20;

pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn matrix_header(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    if rows == 1 && cols == 1 {
        return vec![prefix.to_string()];
    }
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| format!("{prefix}_{}_{}", r + 1, c + 1)))
        .collect()
}

fn matrix_cells(m: &nalgebra::DMatrix<f64>) -> impl Iterator<Item = String> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| num(m[(r, c)])))
}

/// `s, regime, P…` per node and regime (row-major entries).
pub fn write_riccati(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    let n = sol.p[0][0].nrows();
    let mut header = vec!["s".to_string(), "regime".to_string()];
    header.extend(matrix_header("p", n, n));
    let rows = (0..sol.grid.len()).flat_map(|k| {
        (0..sol.num_regimes()).map(move |i| {
            let mut row = vec![num(sol.grid.node(k)), (i + 1).to_string()];
            row.extend(matrix_cells(&sol.p[k][i]));
            row
        })
    });
    write_csv(path, &header, rows)
}

/// `s, regime, Θ…` per node and regime.
pub fn write_theta(path: &Path, strategy: &Strategy) -> Result<()> {
    let (m, n) = strategy.theta[0][0].shape();
    let mut header = vec!["s".to_string(), "regime".to_string()];
    header.extend(matrix_header("theta", m, n));
    let rows = (0..strategy.grid.len()).flat_map(|k| {
        (0..strategy.num_regimes()).map(move |i| {
            let mut row = vec![num(strategy.grid.node(k)), (i + 1).to_string()];
            row.extend(matrix_cells(&strategy.theta[k][i]));
            row
        })
    });
    write_csv(path, &header, rows)
}

/// Deterministic offsets as `s, regime, v…`; per-scenario offsets as the
/// polynomial coefficients `v = Σ_j c_j zʲ`, `z = (M − mean)/sd`.
pub fn write_offset(path: &Path, strategy: &Strategy) -> Result<()> {
    let grid = &strategy.grid;
    let dn = strategy.num_regimes();
    match &strategy.offset {
        Offset::Deterministic(t) => {
            let m = t[0][0].len();
            let mut header = vec!["s".to_string(), "regime".to_string()];
            header.extend(matrix_header("v", m, 1));
            let rows = (0..grid.len()).flat_map(|k| {
                (0..dn).map(move |i| {
                    let mut row = vec![num(grid.node(k)), (i + 1).to_string()];
                    row.extend(t[k][i].iter().map(|x| num(*x)));
                    row
                })
            });
            write_csv(path, &header, rows)
        }
        Offset::PerScenario(p) => {
            let m = p.coeffs[0][0].nrows();
            let width = p.coeffs.iter().flatten().map(|c| c.ncols()).max().unwrap_or(1);
            let mut header = vec!["s".to_string(), "regime".to_string(), "mean".to_string(), "sd".to_string()];
            for j in 0..width {
                header.extend(matrix_header(&format!("c{j}"), m, 1));
            }
            let rows = (0..grid.len()).flat_map(|k| {
                (0..dn).map(move |i| {
                    let (mean, sd) = p.normalization[k];
                    let c = &p.coeffs[k][i];
                    let mut row = vec![num(grid.node(k)), (i + 1).to_string(), num(mean), num(sd)];
                    for j in 0..width {
                        for r in 0..m {
                            row.push(num(if j < c.ncols() { c[(r, j)] } else { 0.0 }));
                        }
                    }
                    row
                })
            });
            write_csv(path, &header, rows)
        }
    }
}

fn write_matrix_table(path: &Path, eps: &[f64], m: &[Vec<Option<f64>>]) -> Result<()> {
    let mut header = vec!["eps".to_string()];
    header.extend(eps.iter().map(|e| num(*e)));
    let rows = eps.iter().zip(m).map(|(e, row)| {
        let mut r = vec![num(*e)];
        r.extend(row.iter().map(|x| opt(*x)));
        r
    });
    write_csv(path, &header, rows)
}

/// `report.json`, the per-ε norms, the three Cauchy matrices, every
/// per-ε strategy and the limit strategy when there is one.
pub fn write_sweep_bundle(dir: &Path, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    let header: Vec<String> = ["eps", "escape_time", "control_l2", "control_l2_se", "value", "value_se"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = report.records.iter().map(|r| {
        vec![
            num(r.epsilon),
            opt(r.escape_time),
            opt(r.control_l2),
            opt(r.control_l2_se),
            opt(r.value),
            opt(r.value_se),
        ]
    });
    write_csv(&dir.join("norms.csv"), &header, rows)?;
    write_matrix_table(&dir.join("cauchy_u.csv"), &report.epsilons, &report.cauchy_u)?;
    write_matrix_table(&dir.join("cauchy_theta.csv"), &report.epsilons, &report.cauchy_theta)?;
    write_matrix_table(&dir.join("cauchy_v.csv"), &report.epsilons, &report.cauchy_v)?;
    for (r, s) in report.records.iter().zip(&report.strategies) {
        if let Some(s) = s {
            write_theta(&dir.join(&r.theta_table), s)?;
            write_offset(&dir.join(&r.v_table), s)?;
        }
    }
    if let Some(limit) = &report.limit {
        write_theta(&dir.join("limit_theta.csv"), limit)?;
        write_offset(&dir.join("limit_v.csv"), limit)?;
    }
    Ok(())
}

/// Per-node mean and standard deviation of every state and control
/// component, plus the first [`ENSEMBLE_SAMPLE_PATHS`] paths in full.
pub fn write_ensemble(dir: &Path, name: &str, ens: &StateEnsemble) -> Result<()> {
    fs::create_dir_all(dir)?;
    let count = ens.count();
    let n = ens.x0.len();
    let m = ens.u.first().and_then(|p| p.first()).map_or(0, |u| u.len());
    let mut header = vec!["s".to_string()];
    for (label, dim) in [("x", n), ("u", m)] {
        for j in 0..dim {
            header.push(format!("{label}{}_mean", j + 1));
            header.push(format!("{label}{}_sd", j + 1));
        }
    }
    let stats = |vals: Vec<f64>| -> [String; 2] {
        let (mean, se) = crate::linalg::mean_and_se(&vals);
        [num(mean), num(se * (vals.len() as f64).sqrt())]
    };
    let rows = (0..ens.grid.len()).map(|k| {
        let mut row = vec![num(ens.grid.node(k))];
        for j in 0..n {
            row.extend(stats((0..count).map(|p| ens.x[p][k][j]).collect()));
        }
        for j in 0..m {
            row.extend(stats((0..count).map(|p| ens.u[p][k][j]).collect()));
        }
        row
    });
    write_csv(&dir.join(format!("{name}_stats.csv")), &header, rows)?;

    let mut header = vec!["path".to_string(), "s".to_string(), "regime".to_string()];
    header.extend((1..=n).map(|j| format!("x{j}")));
    header.extend((1..=m).map(|j| format!("u{j}")));
    let rows = (0..count.min(ENSEMBLE_SAMPLE_PATHS)).flat_map(|p| {
        (0..ens.grid.len()).map(move |k| {
            let mut row = vec![p.to_string(), num(ens.grid.node(k)), (ens.regimes[p][k] + 1).to_string()];
            row.extend(ens.x[p][k].iter().map(|v| num(*v)));
            row.extend(ens.u[p][k].iter().map(|v| num(*v)));
            row
        })
    });
    write_csv(&dir.join(format!("{name}_paths.csv")), &header, rows)
}

/// Cost estimate without the per-path values.
pub fn write_cost(path: &Path, cost: &CostEstimate) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        epsilon: f64,
        mean: f64,
        std_error: f64,
        control_l2: f64,
        control_l2_se: f64,
        paths: usize,
    }
    write_json(
        path,
        &Summary {
            epsilon: cost.epsilon,
            mean: cost.mean,
            std_error: cost.std_error,
            control_l2: cost.control_l2,
            control_l2_se: cost.control_l2_se,
            paths: cost.per_path.len(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, std::f64::consts::PI] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
    }
}
