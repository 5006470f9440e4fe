use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_start = s_0 < s_1 < ... < s_N = t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::Config(format!(
                "grid needs finite t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self { t_start, t_end, steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Node `k`; the last node is exactly `t_end`.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| self.node(k))
    }

    /// Index of the last node `s_k <= t` (clamped to the grid).
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= self.t_start {
            return 0;
        }
        let k = ((t - self.t_start) / self.h() + 1e-9).floor() as usize;
        k.min(self.steps)
    }

    /// Index of the node closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = ((t - self.t_start) / self.h()).round();
        (k.max(0.0) as usize).min(self.steps)
    }

    /// Same span, `factor` times as many steps. Every node of `self` is a node of the result.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            steps: self.steps * factor.max(1),
            ..*self
        }
    }

    /// Sub-grid on `[t_start, s_k]`, sharing the first `k + 1` nodes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(self.t_start, self.node(k), k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_uniform_and_end_exactly() {
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let n: Vec<f64> = g.nodes().collect();
        assert_eq!(n.len(), 4);
        assert_eq!(n[3], 1.0);
        assert!((n[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 3).is_err());
    }

    #[test]
    fn index_lookup() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        assert_eq!(g.nearest_index(0.9), 900);
        assert_eq!(g.floor_index(0.5), 500);
        assert_eq!(g.floor_index(2.0), 1000);
        let r = g.refined(4);
        assert_eq!(r.node(4 * 250), g.node(250));
    }
}
