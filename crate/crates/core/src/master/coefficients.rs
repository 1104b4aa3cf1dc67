//! Coefficient time series `A1..A4` and the driven Hamiltonian shift.

use std::io::Write;

use crate::bath::BathCorrelation;
use crate::error::{Error, Result};
use crate::grid::{trapezoid_weight, TimeGrid};
use crate::io::fmt_num;
use crate::scalar::{Cplx, Real};
use crate::volterra::{KernelSet, KernelTable};

/// Coefficients at a single instant. `a3`, `a4` are the imaginary parts of
/// the purely imaginary `A3`, `A4`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coefficients<T> {
    pub a1: T,
    pub a2: T,
    pub a3: T,
    pub a4: T,
    pub shift: T,
}

/// `A1(t)..A4(t)` and `shift(t)` on a grid, with a per-node validity mask.
///
/// Only the physically meaningful parts are stored (`Re A1`, `Re A2`,
/// `Im A3`, `Im A4`); the size of the discarded parts is kept in
/// [`CoefficientSet::reality_defect`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet<T> {
    grid: TimeGrid<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    a3: Vec<T>,
    a4: Vec<T>,
    shift: Vec<T>,
    valid: Vec<bool>,
    reality: [T; 4],
}

impl<T: Real> CoefficientSet<T> {
    /// Builds a set from complex `A_j` samples. Entries at invalid nodes
    /// are stored as NaN.
    pub fn from_complex(
        grid: TimeGrid<T>,
        a: [Vec<Cplx<T>>; 4],
        shift: Vec<T>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = grid.len();
        if a.iter().any(|v| v.len() != n) || shift.len() != n || valid.len() != n {
            return Err(Error::GridMismatch(format!(
                "coefficient arrays do not match a grid with {n} nodes"
            )));
        }
        let mut reality = [T::zero(); 4];
        let [a1, a2, a3, a4] = a;
        let pick = |v: Vec<Cplx<T>>, imag: bool, defect: &mut T| -> Vec<T> {
            v.into_iter()
                .zip(&valid)
                .map(|(z, &ok)| {
                    if !ok {
                        return T::nan();
                    }
                    let (keep, drop) = if imag { (z.im, z.re) } else { (z.re, z.im) };
                    *defect = defect.max(drop.abs());
                    keep
                })
                .collect()
        };
        let a1 = pick(a1, false, &mut reality[0]);
        let a2 = pick(a2, false, &mut reality[1]);
        let a3 = pick(a3, true, &mut reality[2]);
        let a4 = pick(a4, true, &mut reality[3]);
        let shift = shift
            .into_iter()
            .zip(&valid)
            .map(|(s, &ok)| if ok { s } else { T::nan() })
            .collect();
        Ok(Self {
            grid,
            a1,
            a2,
            a3,
            a4,
            shift,
            valid,
            reality,
        })
    }

    /// Same coefficients at every node.
    pub fn constant(grid: TimeGrid<T>, c: Coefficients<T>) -> Self {
        let n = grid.len();
        Self {
            grid,
            a1: vec![c.a1; n],
            a2: vec![c.a2; n],
            a3: vec![c.a3; n],
            a4: vec![c.a4; n],
            shift: vec![c.shift; n],
            valid: vec![true; n],
            reality: [T::zero(); 4],
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn a1(&self) -> &[T] {
        &self.a1
    }

    pub fn a2(&self) -> &[T] {
        &self.a2
    }

    /// `Im A3`.
    pub fn a3(&self) -> &[T] {
        &self.a3
    }

    /// `Im A4`.
    pub fn a4(&self) -> &[T] {
        &self.a4
    }

    pub fn shift(&self) -> &[T] {
        &self.shift
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn series(&self, j: usize) -> &[T] {
        match j {
            1 => &self.a1,
            2 => &self.a2,
            3 => &self.a3,
            4 => &self.a4,
            _ => panic!("coefficient index {j} outside 1..=4"),
        }
    }

    /// `[max|Im A1|, max|Im A2|, max|Re A3|, max|Re A4|]` over valid nodes.
    pub fn reality_defect(&self) -> [T; 4] {
        self.reality
    }

    pub fn n_invalid(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn at_node(&self, k: usize) -> Coefficients<T> {
        Coefficients {
            a1: self.a1[k],
            a2: self.a2[k],
            a3: self.a3[k],
            a4: self.a4[k],
            shift: self.shift[k],
        }
    }

    /// Linear interpolation at `t`, refusing intervals touching a masked
    /// node.
    pub fn at(&self, t: T) -> Result<Coefficients<T>> {
        let dt = self.grid.dt();
        let n = self.grid.n_steps();
        let s = (t / dt).max(T::zero());
        let k = s.floor().to_f64_lossy() as usize;
        if k >= n {
            if !self.valid[n] {
                return Err(Error::MaskedInterval { t: self.grid.time(n).to_f64_lossy() });
            }
            return Ok(self.at_node(n));
        }
        if !self.valid[k] || !self.valid[k + 1] {
            return Err(Error::MaskedInterval { t: self.grid.time(k).to_f64_lossy() });
        }
        let f = s - T::from_count(k);
        let lerp = |v: &[T]| v[k] + (v[k + 1] - v[k]) * f;
        Ok(Coefficients {
            a1: lerp(&self.a1),
            a2: lerp(&self.a2),
            a3: lerp(&self.a3),
            a4: lerp(&self.a4),
            shift: lerp(&self.shift),
        })
    }

    /// Errors if any node is masked.
    pub fn ensure_valid(&self) -> Result<()> {
        match self.valid.iter().position(|v| !*v) {
            Some(k) => Err(Error::MaskedInterval {
                t: self.grid.time(k.saturating_sub(1)).to_f64_lossy(),
            }),
            None => Ok(()),
        }
    }

    /// `max_t |A_j|` over nodes valid in `self`.
    pub fn max_abs(&self, j: usize) -> T {
        self.series(j)
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .fold(T::zero(), |m, (v, _)| m.max(v.abs()))
    }

    /// `max_t |A_j - B_j| / max_t |A_j|` for `j = 1..4`, over nodes valid in
    /// both sets. A zero denominator reports the absolute deviation.
    pub fn relative_deviation(&self, other: &Self) -> Result<[T; 4]> {
        self.grid.ensure_same(&other.grid, "coefficient comparison")?;
        let mut out = [T::zero(); 4];
        for (j, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.series(j + 1), other.series(j + 1));
            let mut dev = T::zero();
            let mut scale = T::zero();
            for k in 0..a.len() {
                if self.valid[k] && other.valid[k] {
                    dev = dev.max((a[k] - b[k]).abs());
                    scale = scale.max(a[k].abs());
                }
            }
            *o = if scale > T::zero() { dev / scale } else { dev };
        }
        Ok(out)
    }

    /// CSV with columns `t, A1, A2, ImA3, ImA4, shift`; masked nodes print
    /// NaN.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,A1,A2,ImA3,ImA4,shift")?;
        for (k, t) in self.grid.times().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_num(t),
                fmt_num(self.a1[k]),
                fmt_num(self.a2[k]),
                fmt_num(self.a3[k]),
                fmt_num(self.a4[k]),
                fmt_num(self.shift[k])
            )?;
        }
        Ok(())
    }
}

/// `dt * sum_j w_j kernel(t_i - t_j) x(t_i, t_j)` over the window `[0, t_i]`.
fn window_integral<T: Real>(
    alpha_row: impl Fn(isize) -> T,
    x: &KernelTable<T>,
    i: usize,
    dt: T,
) -> Cplx<T> {
    let mut s = Cplx::new(T::zero(), T::zero());
    for (j, v) in x.row(i).iter().enumerate() {
        s += *v * (trapezoid_weight::<T>(j, 0, i) * alpha_row(i as isize - j as isize));
    }
    s * dt
}

/// Integrates the kernel tables against the bath correlation:
/// `A1 = int alpha_I x21`, `A2 = int alpha_I x22`,
/// `A3 = int (alpha_R x11 + alpha_I x23)`, `A4 = int (alpha_R x12 + alpha_I x24)`
/// and `shift = int alpha_I x25`, all over `t' in [0, t]` with arguments
/// `t - t'`.
pub fn assemble_coefficients<T: Real>(
    kernels: &KernelSet<T>,
    alpha: &BathCorrelation<T>,
    grid: &TimeGrid<T>,
) -> Result<CoefficientSet<T>> {
    for t in kernels.tables() {
        t.grid().ensure_same(grid, t.kind().name())?;
    }
    alpha.grid().ensure_same(grid, "bath correlation vs coefficient grid")?;
    let dt = grid.dt();
    let re = |k: isize| alpha.real_at(k);
    let im = |k: isize| alpha.imag_at(k);
    let n = grid.len();
    let mut a: [Vec<Cplx<T>>; 4] = Default::default();
    let mut shift = Vec::with_capacity(n);
    for i in 0..n {
        a[0].push(window_integral(im, &kernels.x21, i, dt));
        a[1].push(window_integral(im, &kernels.x22, i, dt));
        a[2].push(window_integral(re, &kernels.x11, i, dt) + window_integral(im, &kernels.x23, i, dt));
        a[3].push(window_integral(re, &kernels.x12, i, dt) + window_integral(im, &kernels.x24, i, dt));
        shift.push(window_integral(im, &kernels.x25, i, dt).re);
    }
    CoefficientSet::from_complex(*grid, a, shift, vec![true; n])
}

/// Constant coefficients of the delta-correlated limit: `A1 = alpha_I~`,
/// `A2 = A3 = 0`, `A4 = -i alpha_R~`.
pub fn markovian_coefficients<T: Real>(
    alpha_tilde_r: T,
    alpha_tilde_i: T,
    grid: &TimeGrid<T>,
) -> CoefficientSet<T> {
    CoefficientSet::constant(
        *grid,
        Coefficients {
            a1: alpha_tilde_i,
            a2: T::zero(),
            a3: T::zero(),
            a4: -alpha_tilde_r,
            shift: T::zero(),
        },
    )
}
