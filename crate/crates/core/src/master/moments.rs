//! Closed first/second-moment equations of the master equation.
//!
//! With `k(t) = M w^2 + 2 A1`, `A3 = i a3`, `A4 = i a4`, force
//! `F = f1 + shift` and velocity drive `f2`:
//!
//! ```text
//! d<x>/dt   = <p>/M + f2
//! d<p>/dt   = -k <x> - 2 A2 <p> - F
//! dVxx/dt   = 2 Cxp / M
//! dVpp/dt   = -2 k Cxp - 4 A2 Vpp - 2 a4
//! dCxp/dt   = Vpp / M - k Vxx - 2 A2 Cxp + a3
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bath::SystemParams;
use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::io::fmt_num;
use crate::master::coefficients::{CoefficientSet, Coefficients};
use crate::scalar::Real;

/// Means and symmetrized central second moments of `x` and `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianState<T> {
    pub mean_x: T,
    pub mean_p: T,
    pub var_xx: T,
    pub var_pp: T,
    pub cov_xp: T,
}

impl<T: Real> GaussianState<T> {
    pub fn new(mean_x: T, mean_p: T, var_xx: T, var_pp: T, cov_xp: T) -> Result<Self> {
        let g = Self {
            mean_x,
            mean_p,
            var_xx,
            var_pp,
            cov_xp,
        };
        g.validate()?;
        Ok(g)
    }

    /// Coherent state of the oscillator with mass `mass`, frequency `omega`.
    pub fn coherent(mass: T, omega: T, x0: T, p0: T) -> Self {
        Self::thermal(mass, omega, T::zero(), x0, p0)
    }

    /// Displaced thermal state with mean occupation `nbar`.
    pub fn thermal(mass: T, omega: T, nbar: T, x0: T, p0: T) -> Self {
        let s = T::lit(2.0) * nbar + T::one();
        let two = T::lit(2.0);
        Self {
            mean_x: x0,
            mean_p: p0,
            var_xx: s / (two * mass * omega),
            var_pp: s * mass * omega / two,
            cov_xp: T::zero(),
        }
    }

    /// `var_xx var_pp - cov_xp^2`.
    pub fn determinant(&self) -> T {
        self.var_xx * self.var_pp - self.cov_xp * self.cov_xp
    }

    /// Positive variances and a determinant of at least `1/4`.
    pub fn is_physical(&self) -> bool {
        self.var_xx > T::zero()
            && self.var_pp > T::zero()
            && self.determinant() >= T::lit(0.25) * (T::one() - T::lit(1e-12))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.var_xx > T::zero() && self.var_pp > T::zero()) {
            return Err(invalid("initial state", "variances must be positive"));
        }
        if !(self.determinant() >= T::zero()) {
            return Err(invalid("initial state", "covariance matrix must be positive semidefinite"));
        }
        Ok(())
    }

    fn to_array(self) -> [T; 5] {
        [self.mean_x, self.mean_p, self.var_xx, self.var_pp, self.cov_xp]
    }

    fn from_array(a: [T; 5]) -> Self {
        Self {
            mean_x: a[0],
            mean_p: a[1],
            var_xx: a[2],
            var_pp: a[3],
            cov_xp: a[4],
        }
    }

    /// Largest absolute difference over the five components.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .fold(T::zero(), |m, (a, b)| m.max((*a - b).abs()))
    }
}

fn moment_rhs<T: Real>(y: &[T; 5], c: &Coefficients<T>, mass: T, w2: T, f1: T, f2: T) -> [T; 5] {
    let two = T::lit(2.0);
    let k = mass * w2 + two * c.a1;
    let [x, p, vxx, vpp, cxp] = *y;
    [
        p / mass + f2,
        -k * x - two * c.a2 * p - (f1 + c.shift),
        two * cxp / mass,
        -two * k * cxp - T::lit(4.0) * c.a2 * vpp - two * c.a4,
        vpp / mass - k * vxx - two * c.a2 * cxp + c.a3,
    ]
}

/// Integrates the moment equations with classical Runge–Kutta, `substeps`
/// equal steps per grid interval (at least one), using linearly
/// interpolated coefficients.
pub fn propagate_moments_with<T: Real>(
    g0: &GaussianState<T>,
    coeffs: &CoefficientSet<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    substeps: usize,
) -> Result<Vec<GaussianState<T>>> {
    coeffs.grid().ensure_same(grid, "coefficients vs propagation grid")?;
    g0.validate()?;
    let mass = sys.mass();
    let w2 = sys.renormalized_frequency().powi(2);
    let n_sub = substeps.max(1);
    let h = grid.dt() / T::from_count(n_sub);
    let (f1, f2) = (sys.drive_f1(), sys.drive_f2());
    let half = T::lit(0.5);
    let eval = |t: T, y: &[T; 5]| -> Result<[T; 5]> {
        let c = coeffs.at(t)?;
        Ok(moment_rhs(y, &c, mass, w2, f1.value(t), f2.value(t)))
    };
    let axpy = |y: &[T; 5], k: &[T; 5], s: T| {
        let mut o = *y;
        for i in 0..5 {
            o[i] += s * k[i];
        }
        o
    };
    let mut y = g0.to_array();
    let mut out = Vec::with_capacity(grid.len());
    out.push(*g0);
    for step in 0..grid.n_steps() {
        let t0 = grid.time(step);
        for s in 0..n_sub {
            let t = t0 + T::from_count(s) * h;
            let k1 = eval(t, &y)?;
            let k2 = eval(t + half * h, &axpy(&y, &k1, half * h))?;
            let k3 = eval(t + half * h, &axpy(&y, &k2, half * h))?;
            let k4 = eval(t + h, &axpy(&y, &k3, h))?;
            for i in 0..5 {
                y[i] += h / T::lit(6.0) * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
            }
        }
        out.push(GaussianState::from_array(y));
    }
    Ok(out)
}

/// As [`propagate_moments_with`], with the substep count the Fock
/// propagator would use for a 40-level basis.
pub fn propagate_moments<T: Real>(
    g0: &GaussianState<T>,
    coeffs: &CoefficientSet<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<Vec<GaussianState<T>>> {
    coeffs.ensure_valid()?;
    let n = super::fock::substeps(coeffs, sys, 40);
    propagate_moments_with(g0, coeffs, sys, grid, n)
}

/// CSV with columns `t, mean_x, mean_p, var_xx, var_pp, cov_xp`.
pub fn write_moment_rows<T: Real, W: Write>(
    mut w: W,
    grid: &TimeGrid<T>,
    rows: &[GaussianState<T>],
) -> std::io::Result<()> {
    writeln!(w, "t,mean_x,mean_p,var_xx,var_pp,cov_xp")?;
    for (k, g) in rows.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_num(grid.time(k)),
            fmt_num(g.mean_x),
            fmt_num(g.mean_p),
            fmt_num(g.var_xx),
            fmt_num(g.var_pp),
            fmt_num(g.cov_xp)
        )?;
    }
    Ok(())
}
