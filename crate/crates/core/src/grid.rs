use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Uniform time grid `t_k = k * dt` for `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    t_max: T,
    n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_max: T, n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(invalid("n_steps", format!("need at least 2 steps, got {n_steps}")));
        }
        if !(t_max > T::zero()) || !t_max.is_finite() {
            return Err(invalid("t_max", format!("must be positive and finite, got {t_max}")));
        }
        Ok(Self { t_max, n_steps })
    }

    pub fn t_max(&self) -> T {
        self.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> T {
        self.t_max / T::from_count(self.n_steps)
    }

    pub fn time(&self, k: usize) -> T {
        T::from_count(k) * self.dt()
    }

    pub fn times(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.len()).map(move |k| self.time(k))
    }

    /// Grid with the same span and twice the number of steps.
    pub fn refined(&self) -> Self {
        Self {
            t_max: self.t_max,
            n_steps: 2 * self.n_steps,
        }
    }

    /// Index of the node closest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: T) -> usize {
        let k = (t / self.dt()).round().to_f64_lossy();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    pub(crate) fn ensure_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.n_steps != other.n_steps || self.t_max != other.t_max {
            return Err(crate::Error::GridMismatch(format!(
                "{what}: ({}, {}) vs ({}, {})",
                self.t_max, self.n_steps, other.t_max, other.n_steps
            )));
        }
        Ok(())
    }
}

/// Composite trapezoid weight of node `k` on the sub-grid `lo..=hi`.
///
/// Zero-width intervals (`lo == hi`) integrate to zero.
#[inline]
pub fn trapezoid_weight<T: Real>(k: usize, lo: usize, hi: usize) -> T {
    debug_assert!(lo <= k && k <= hi);
    if lo == hi {
        T::zero()
    } else if k == lo || k == hi {
        T::lit(0.5)
    } else {
        T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0_f64, 1).is_err());
        assert!(TimeGrid::new(0.0_f64, 10).is_err());
        assert!(TimeGrid::new(f64::INFINITY, 10).is_err());
    }

    #[test]
    fn nodes_are_uniform() {
        let g = TimeGrid::new(2.0_f64, 8).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.time(8), 2.0);
        assert_eq!(g.nearest_index(0.26), 1);
        assert_eq!(g.nearest_index(5.0), 8);
        assert_eq!(g.refined().dt(), 0.125);
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = TimeGrid::new(3.0_f64, 12).unwrap();
        let s: f64 = (0..g.len())
            .map(|k| trapezoid_weight::<f64>(k, 0, 12) * g.dt() * (2.0 * g.time(k) + 1.0))
            .sum();
        assert!((s - 12.0).abs() < 1e-12);
    }
}
