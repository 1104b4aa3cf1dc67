//! Kernel tables `x_jk(t, t')` from the second-kind integral equations,
//! discretized with the composite trapezoid rule on a uniform grid.
//!
//! `x11`/`x12` have Volterra structure in `t'` and are filled by backward
//! substitution from `t' = t`. The remaining tables couple the whole window
//! `[0, t]` and share one dense operator `I + K` per final time, which is
//! LU-factorized once and reused for every right-hand side.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{BathCorrelation, SystemParams};
use crate::error::Result;
use crate::grid::{trapezoid_weight, TimeGrid};
use crate::io::fmt_num;
use crate::linalg::Lu;
use crate::scalar::{cplx, imag_unit, Cplx, Real};

/// One row of a kernel table.
type Row<T> = Vec<Cplx<T>>;

/// Condition numbers above this value attach a warning to the table.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    X11,
    X12,
    X21,
    X22,
    X23,
    X24,
    X25,
}

impl KernelKind {
    pub const ALL: [KernelKind; 7] = [
        KernelKind::X11,
        KernelKind::X12,
        KernelKind::X21,
        KernelKind::X22,
        KernelKind::X23,
        KernelKind::X24,
        KernelKind::X25,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::X11 => "x11",
            KernelKind::X12 => "x12",
            KernelKind::X21 => "x21",
            KernelKind::X22 => "x22",
            KernelKind::X23 => "x23",
            KernelKind::X24 => "x24",
            KernelKind::X25 => "x25",
        }
    }

    /// Value at coincident times `t' = t`.
    pub fn endpoint<T: Real>(self) -> Cplx<T> {
        match self {
            KernelKind::X12 => -imag_unit::<T>(),
            KernelKind::X21 => Cplx::new(T::one(), T::zero()),
            _ => Cplx::new(T::zero(), T::zero()),
        }
    }

    /// True when the entries are purely imaginary; otherwise purely real.
    pub fn is_imaginary(self) -> bool {
        matches!(
            self,
            KernelKind::X11 | KernelKind::X12 | KernelKind::X23 | KernelKind::X24
        )
    }
}

/// Poorly conditioned final-time system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningWarning {
    pub index: usize,
    pub condition: f64,
}

/// Lower-triangular table `x(t_i, t_j)`, `j <= i`, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable<T> {
    kind: KernelKind,
    grid: TimeGrid<T>,
    values: Vec<Cplx<T>>,
    warnings: Vec<ConditioningWarning>,
}

#[inline]
fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

impl<T: Real> KernelTable<T> {
    fn from_rows(kind: KernelKind, grid: TimeGrid<T>, rows: Vec<Vec<Cplx<T>>>) -> Self {
        debug_assert_eq!(rows.len(), grid.len());
        let mut values = Vec::with_capacity(row_offset(grid.len()));
        for (i, r) in rows.into_iter().enumerate() {
            debug_assert_eq!(r.len(), i + 1);
            values.extend(r);
        }
        Self {
            kind,
            grid,
            values,
            warnings: Vec::new(),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    /// Entry at final-time index `i` and inner index `j`; zero for `j > i`.
    pub fn get(&self, i: usize, j: usize) -> Cplx<T> {
        if j > i {
            Cplx::new(T::zero(), T::zero())
        } else {
            self.values[row_offset(i) + j]
        }
    }

    /// Row `x(t_i, t_0..=t_i)`.
    pub fn row(&self, i: usize) -> &[Cplx<T>] {
        &self.values[row_offset(i)..row_offset(i + 1)]
    }

    pub fn warnings(&self) -> &[ConditioningWarning] {
        &self.warnings
    }

    /// Largest `|Re x|` over the table.
    pub fn max_abs_re(&self) -> T {
        self.values.iter().fold(T::zero(), |m, z| m.max(z.re.abs()))
    }

    /// Largest `|Im x|` over the table.
    pub fn max_abs_im(&self) -> T {
        self.values.iter().fold(T::zero(), |m, z| m.max(z.im.abs()))
    }

    /// Size of the component that must vanish for this kind.
    pub fn reality_defect(&self) -> T {
        if self.kind.is_imaginary() {
            self.max_abs_re()
        } else {
            self.max_abs_im()
        }
    }

    /// CSV with columns `i, j, t_i, t_j, re, im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,t_i,t_j,re,im")?;
        for i in 0..self.grid.len() {
            for (j, z) in self.row(i).iter().enumerate() {
                writeln!(
                    w,
                    "{i},{j},{},{},{},{}",
                    fmt_num(self.grid.time(i)),
                    fmt_num(self.grid.time(j)),
                    fmt_num(z.re),
                    fmt_num(z.im)
                )?;
            }
        }
        Ok(())
    }
}

/// Sampled `sin(w k dt)`, `cos(w k dt)` for `k = 0..=N`.
struct Phases<T> {
    sin: Vec<T>,
    cos: Vec<T>,
}

impl<T: Real> Phases<T> {
    fn new(omega: T, grid: &TimeGrid<T>) -> Self {
        let (sin, cos) = grid.times().map(|t| (omega * t).sin_cos()).unzip();
        Self { sin, cos }
    }
}

/// `kappa(d) = sum_{l=0}^{d} sin(w l dt) alpha_I((l - d) dt)`, the inner
/// sum of the reduced `x11`/`x12` kernel.
fn volterra_kernel<T: Real>(alpha: &BathCorrelation<T>, ph: &Phases<T>) -> Vec<T> {
    let n = ph.sin.len();
    (0..n)
        .map(|d| {
            (0..=d)
                .map(|l| ph.sin[l] * alpha.imag_at(l as isize - d as isize))
                .sum()
        })
        .collect()
}

fn check_grids<T: Real>(alpha: &BathCorrelation<T>, grid: &TimeGrid<T>) -> Result<()> {
    alpha.grid().ensure_same(grid, "bath correlation vs kernel grid")
}

/// Solves the `x11` and `x12` equations for every final time.
///
/// After exchanging the order of integration the kernel becomes
/// `K(t', t2) = (2/(M w)) int_{t'}^{t2} sin w(t1 - t') alpha_I(t1 - t2) dt1`,
/// and `x(t, t_j)` depends only on `x(t, t_k)` with `k > j`.
pub fn solve_x11_x12<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<(KernelTable<T>, KernelTable<T>)> {
    check_grids(alpha, grid)?;
    let m = sys.mass();
    let w = sys.renormalized_frequency();
    let dt = grid.dt();
    let ph = Phases::new(w, grid);
    let kappa = volterra_kernel(alpha, &ph);
    let pref = T::lit(2.0) / (m * w) * dt * dt;
    let half = T::lit(0.5);

    let rows: Vec<(Row<T>, Row<T>)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut y1 = vec![Cplx::new(T::zero(), T::zero()); i + 1];
            let mut y2 = y1.clone();
            for j in (0..=i).rev() {
                let d = i - j;
                let mut s1 = cplx(T::zero(), ph.sin[d] / (m * w));
                let mut s2 = cplx(T::zero(), -ph.cos[d]);
                for k in j + 1..=i {
                    let c = if k == i { half } else { T::one() };
                    let kjk = pref * c * kappa[k - j];
                    s1 += y1[k] * kjk;
                    s2 += y2[k] * kjk;
                }
                y1[j] = s1;
                y2[j] = s2;
            }
            (y1, y2)
        })
        .collect();
    let (r1, r2): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((
        KernelTable::from_rows(KernelKind::X11, *grid, r1),
        KernelTable::from_rows(KernelKind::X12, *grid, r2),
    ))
}

/// Running sums for the window-coupling kernel:
/// `plus[d][q] = sum_{p=0}^{q} s(p) a(p + d)` and
/// `minus[d][q] = sum_{p=0}^{q} s(p + d) a(p)`, with `s(p) = sin(w p dt)`
/// and `a(p) = alpha_I(p dt)`. Both are indexed by `d * (N + 1) + q`.
struct WindowSums<T> {
    n: usize,
    plus: Vec<T>,
    minus: Vec<T>,
}

impl<T: Real> WindowSums<T> {
    fn new(alpha: &BathCorrelation<T>, ph: &Phases<T>) -> Self {
        let n = ph.sin.len();
        let a = alpha.alpha_i();
        let mut plus = vec![T::zero(); n * n];
        let mut minus = vec![T::zero(); n * n];
        for d in 0..n {
            let mut sp = T::zero();
            let mut sm = T::zero();
            for q in 0..n - d {
                sp += ph.sin[q] * a[q + d];
                sm += ph.sin[q + d] * a[q];
                plus[d * n + q] = sp;
                minus[d * n + q] = sm;
            }
        }
        Self { n, plus, minus }
    }

    /// `sum_{m=max(j,k)}^{i} sin w(t_m - t_j) alpha_I(t_m - t_k)`.
    #[inline]
    fn window(&self, i: usize, j: usize, k: usize) -> T {
        if j >= k {
            self.plus[(j - k) * self.n + (i - j)]
        } else {
            self.minus[(k - j) * self.n + (i - k)]
        }
    }
}

/// Shared ingredients of the window-coupled equations.
struct WindowSystem<'a, T> {
    alpha: &'a BathCorrelation<T>,
    ph: Phases<T>,
    sums: WindowSums<T>,
    pref: T,
    dt: T,
}

impl<'a, T: Real> WindowSystem<'a, T> {
    fn new(alpha: &'a BathCorrelation<T>, sys: &SystemParams<T>, grid: &TimeGrid<T>) -> Self {
        let ph = Phases::new(sys.renormalized_frequency(), grid);
        let sums = WindowSums::new(alpha, &ph);
        Self {
            alpha,
            ph,
            sums,
            pref: T::lit(2.0) / (sys.mass() * sys.renormalized_frequency()),
            dt: grid.dt(),
        }
    }

    /// Discrete kernel entry `K(j, k)` for final time `i`; the equation is
    /// `(I + K) y = f`.
    #[inline]
    fn entry(&self, i: usize, j: usize, k: usize) -> T {
        if j == i {
            return T::zero();
        }
        let half = T::lit(0.5);
        let inner = if k == 0 { half } else { T::one() };
        let window = self.sums.window(i, j, k)
            - half * self.ph.sin[i - j] * self.alpha.imag_at(i as isize - k as isize);
        self.pref * self.dt * self.dt * inner * window
    }

    fn matrix(&self, i: usize) -> Vec<T> {
        let n = i + 1;
        let mut a = vec![T::zero(); n * n];
        for j in 0..n {
            for k in 0..n {
                a[j * n + k] = self.entry(i, j, k);
            }
            a[j * n + j] += T::one();
        }
        a
    }

    fn factor(&self, i: usize) -> Result<(Lu<T>, Option<ConditioningWarning>)> {
        let lu = Lu::factor(self.matrix(i), i + 1, i)?;
        let mut warning = None;
        if self.alpha.has_memory() {
            let cond = lu.condition_estimate().to_f64_lossy();
            if !(cond <= CONDITION_LIMIT) {
                warn!("final-time system {i} is ill-conditioned (condition estimate {cond:e})");
                warning = Some(ConditioningWarning {
                    index: i,
                    condition: cond,
                });
            }
        }
        Ok((lu, warning))
    }

    /// `-(2/(M w)) int_{t_j}^{t_i} sin w(t1 - t_j) g(t1) dt1` for all `j`.
    fn sine_transform(&self, i: usize, g: &[Cplx<T>]) -> Vec<Cplx<T>> {
        (0..=i)
            .map(|j| {
                let mut s = Cplx::new(T::zero(), T::zero());
                for m in j..=i {
                    s += g[m] * (trapezoid_weight::<T>(m, j, i) * self.ph.sin[m - j]);
                }
                s * (-self.pref * self.dt)
            })
            .collect()
    }

    /// `-2 int_{t_j}^{t_i} cos w(t1 - t_j) g(t1) dt1` for all `j`.
    fn cosine_transform(&self, i: usize, g: &[Cplx<T>]) -> Vec<Cplx<T>> {
        (0..=i)
            .map(|j| {
                let mut s = Cplx::new(T::zero(), T::zero());
                for m in j..=i {
                    s += g[m] * (trapezoid_weight::<T>(m, j, i) * self.ph.cos[m - j]);
                }
                s * (-T::lit(2.0) * self.dt)
            })
            .collect()
    }

    /// Source of the `x23`/`x24` equations built from row `i` of `x1`.
    fn noise_source(&self, i: usize, x1: &[Cplx<T>]) -> Vec<Cplx<T>> {
        // g(t_m) = int_0^{t_i} alpha_R(t_m - t_k) x1(t_i, t_k) dt_k
        let g: Vec<Cplx<T>> = (0..=i)
            .map(|m| {
                let mut s = Cplx::new(T::zero(), T::zero());
                for (k, x) in x1.iter().enumerate() {
                    s += *x * (trapezoid_weight::<T>(k, 0, i)
                        * self.alpha.real_at(m as isize - k as isize));
                }
                s * self.dt
            })
            .collect();
        self.sine_transform(i, &g)
    }

    fn drive_source(&self, i: usize, f1: &[T], f2: &[T]) -> Vec<Cplx<T>> {
        let g1: Vec<Cplx<T>> = f1[..=i].iter().map(|&v| Cplx::new(v, T::zero())).collect();
        let g2: Vec<Cplx<T>> = f2[..=i].iter().map(|&v| Cplx::new(v, T::zero())).collect();
        let a = self.sine_transform(i, &g1);
        let b = self.cosine_transform(i, &g2);
        a.into_iter().zip(b).map(|(x, y)| x + y).collect()
    }
}

/// All seven kernel tables from one factorization per final time.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet<T> {
    pub x11: KernelTable<T>,
    pub x12: KernelTable<T>,
    pub x21: KernelTable<T>,
    pub x22: KernelTable<T>,
    pub x23: KernelTable<T>,
    pub x24: KernelTable<T>,
    pub x25: KernelTable<T>,
}

impl<T: Real> KernelSet<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        self.x11.grid()
    }

    pub fn tables(&self) -> [&KernelTable<T>; 7] {
        [
            &self.x11, &self.x12, &self.x21, &self.x22, &self.x23, &self.x24, &self.x25,
        ]
    }

    /// Union of the conditioning warnings (one entry per final time).
    pub fn warnings(&self) -> &[ConditioningWarning] {
        self.x21.warnings()
    }
}

type WindowRows<T> = (Vec<[Vec<Cplx<T>>; 5]>, Vec<ConditioningWarning>);

fn solve_window_rows<T: Real>(
    ws: &WindowSystem<'_, T>,
    grid: &TimeGrid<T>,
    sources: &(dyn Fn(usize) -> [Vec<Cplx<T>>; 5] + Sync),
    active: [bool; 5],
) -> Result<WindowRows<T>> {
    let rows: Vec<Result<_>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut f = sources(i);
            for rhs in f.iter_mut() {
                if rhs.is_empty() {
                    *rhs = zeros(i + 1);
                }
            }
            if i == 0 {
                return Ok((f, None));
            }
            let (lu, warning) = ws.factor(i)?;
            for (rhs, on) in f.iter_mut().zip(active) {
                if on {
                    *rhs = lu.solve_complex(rhs);
                }
            }
            Ok((f, warning))
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    for r in rows {
        let (f, w) = r?;
        out.push(f);
        warnings.extend(w);
    }
    Ok((out, warnings))
}

fn split_rows<T: Real>(
    grid: &TimeGrid<T>,
    rows: Vec<[Vec<Cplx<T>>; 5]>,
    warnings: &[ConditioningWarning],
) -> [KernelTable<T>; 5] {
    let kinds = [
        KernelKind::X21,
        KernelKind::X22,
        KernelKind::X23,
        KernelKind::X24,
        KernelKind::X25,
    ];
    let mut cols: [Vec<Vec<Cplx<T>>>; 5] = Default::default();
    for r in rows {
        for (c, v) in cols.iter_mut().zip(r) {
            c.push(v);
        }
    }
    let mut it = cols.into_iter().zip(kinds).map(|(c, k)| {
        let mut t = KernelTable::from_rows(k, *grid, c);
        t.warnings = warnings.to_vec();
        t
    });
    [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ]
}

fn zeros<T: Real>(n: usize) -> Vec<Cplx<T>> {
    vec![Cplx::new(T::zero(), T::zero()); n]
}

/// Solves the `x21` and `x22` equations.
pub fn solve_x21_x22<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<(KernelTable<T>, KernelTable<T>)> {
    check_grids(alpha, grid)?;
    let ws = WindowSystem::new(alpha, sys, grid);
    let mw = sys.mass() * sys.renormalized_frequency();
    let src = |i: usize| {
        let f21 = (0..=i).map(|j| Cplx::new(ws.ph.cos[i - j], T::zero())).collect();
        let f22 = (0..=i).map(|j| Cplx::new(-ws.ph.sin[i - j] / mw, T::zero())).collect();
        [f21, f22, Vec::new(), Vec::new(), Vec::new()]
    };
    let (rows, warnings) = solve_window_rows(&ws, grid, &src, [true, true, false, false, false])?;
    let [x21, x22, ..] = split_rows(grid, rows, &warnings);
    Ok((x21, x22))
}

/// Solves the `x23` and `x24` equations, whose sources are the
/// `alpha_R`-weighted integrals of `x11` and `x12` over `[0, t]`.
pub fn solve_x23_x24<T: Real>(
    alpha: &BathCorrelation<T>,
    x11: &KernelTable<T>,
    x12: &KernelTable<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<(KernelTable<T>, KernelTable<T>)> {
    check_grids(alpha, grid)?;
    x11.grid().ensure_same(grid, "x11 vs kernel grid")?;
    x12.grid().ensure_same(grid, "x12 vs kernel grid")?;
    let ws = WindowSystem::new(alpha, sys, grid);
    let src = |i: usize| {
        [
            Vec::new(),
            Vec::new(),
            ws.noise_source(i, x11.row(i)),
            ws.noise_source(i, x12.row(i)),
            Vec::new(),
        ]
    };
    let (rows, warnings) = solve_window_rows(&ws, grid, &src, [false, false, true, true, false])?;
    let [_, _, x23, x24, _] = split_rows(grid, rows, &warnings);
    Ok((x23, x24))
}

/// Solves the driven-case `x25` equation. Zero drives give an exactly zero
/// table without touching the solver.
pub fn solve_x25<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<KernelTable<T>> {
    check_grids(alpha, grid)?;
    if !sys.is_driven() {
        let rows = (0..grid.len()).map(|i| zeros(i + 1)).collect();
        return Ok(KernelTable::from_rows(KernelKind::X25, *grid, rows));
    }
    let ws = WindowSystem::new(alpha, sys, grid);
    let f1 = sys.drive_f1().sample(grid);
    let f2 = sys.drive_f2().sample(grid);
    let src = |i: usize| {
        [
            Vec::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
            ws.drive_source(i, &f1, &f2),
        ]
    };
    let (rows, warnings) = solve_window_rows(&ws, grid, &src, [false, false, false, false, true])?;
    let [.., x25] = split_rows(grid, rows, &warnings);
    Ok(x25)
}

/// Solves every kernel table, factorizing each final-time operator once.
pub fn solve_kernels<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<KernelSet<T>> {
    let (x11, x12) = solve_x11_x12(alpha, sys, grid)?;
    let ws = WindowSystem::new(alpha, sys, grid);
    let mw = sys.mass() * sys.renormalized_frequency();
    let driven = sys.is_driven();
    let f1 = sys.drive_f1().sample(grid);
    let f2 = sys.drive_f2().sample(grid);
    let src = |i: usize| {
        let f21 = (0..=i).map(|j| Cplx::new(ws.ph.cos[i - j], T::zero())).collect();
        let f22 = (0..=i).map(|j| Cplx::new(-ws.ph.sin[i - j] / mw, T::zero())).collect();
        let f25 = if driven {
            ws.drive_source(i, &f1, &f2)
        } else {
            zeros(i + 1)
        };
        [
            f21,
            f22,
            ws.noise_source(i, x11.row(i)),
            ws.noise_source(i, x12.row(i)),
            f25,
        ]
    };
    let (rows, warnings) = solve_window_rows(&ws, grid, &src, [true, true, true, true, driven])?;
    let [x21, x22, x23, x24, x25] = split_rows(grid, rows, &warnings);
    Ok(KernelSet {
        x11,
        x12,
        x21,
        x22,
        x23,
        x24,
        x25,
    })
}

/// Largest residual of the discrete equation for `table`, with every
/// kernel entry re-summed directly from its double-integral definition.
/// `x11`/`x12` are needed as sources for `x23`/`x24`.
pub fn residual<T: Real>(
    table: &KernelTable<T>,
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    sources: Option<(&KernelTable<T>, &KernelTable<T>)>,
) -> T {
    let grid = *table.grid();
    let m = sys.mass();
    let w = sys.renormalized_frequency();
    let dt = grid.dt();
    let pref = T::lit(2.0) / (m * w);
    let s = |p: usize| (w * T::from_count(p) * dt).sin();
    let c = |p: usize| (w * T::from_count(p) * dt).cos();
    let zero = Cplx::new(T::zero(), T::zero());
    let f1 = sys.drive_f1().sample(&grid);
    let f2 = sys.drive_f2().sample(&grid);
    let mut worst = T::zero();
    for i in 1..grid.len() {
        let y = table.row(i);
        for j in 0..=i {
            let (free, coupled): (Cplx<T>, Cplx<T>) = match table.kind() {
                KernelKind::X11 | KernelKind::X12 => {
                    let free = if table.kind() == KernelKind::X11 {
                        cplx(T::zero(), s(i - j) / (m * w))
                    } else {
                        cplx(T::zero(), -c(i - j))
                    };
                    // + (2/(Mw)) int_{t_j}^{t_i} dt1 sin w(t1-t_j) int_{t1}^{t_i} dt2 aI(t1-t2) y(t2)
                    let mut acc = zero;
                    for l in j..=i {
                        let mut inner = zero;
                        for k in l..=i {
                            inner += y[k]
                                * (trapezoid_weight::<T>(k, l, i)
                                    * alpha.imag_at(l as isize - k as isize));
                        }
                        acc += inner * (trapezoid_weight::<T>(l, j, i) * s(l - j) * dt);
                    }
                    (free, acc * (pref * dt))
                }
                _ => {
                    let free = match table.kind() {
                        KernelKind::X21 => cplx(c(i - j), T::zero()),
                        KernelKind::X22 => cplx(-s(i - j) / (m * w), T::zero()),
                        KernelKind::X23 | KernelKind::X24 => {
                            let (a, b) = sources.expect("x11/x12 sources required");
                            let x1 = if table.kind() == KernelKind::X23 { a } else { b };
                            let mut acc = zero;
                            for l in j..=i {
                                let mut inner = zero;
                                for k in 0..=i {
                                    inner += x1.get(i, k)
                                        * (trapezoid_weight::<T>(k, 0, i)
                                            * alpha.real_at(l as isize - k as isize));
                                }
                                acc += inner * (trapezoid_weight::<T>(l, j, i) * s(l - j) * dt);
                            }
                            -acc * (pref * dt)
                        }
                        _ => {
                            let mut acc = T::zero();
                            for l in j..=i {
                                let wl = trapezoid_weight::<T>(l, j, i) * dt;
                                acc += wl * (-pref * s(l - j) * f1[l] - T::lit(2.0) * c(l - j) * f2[l]);
                            }
                            cplx(acc, T::zero())
                        }
                    };
                    // - (2/(Mw)) int_{t_j}^{t_i} dt1 sin w(t1-t_j) int_0^{t1} dt2 aI(t1-t2) y(t2)
                    let mut acc = zero;
                    for l in j..=i {
                        let mut inner = zero;
                        for k in 0..=l {
                            inner += y[k]
                                * (trapezoid_weight::<T>(k, 0, l)
                                    * alpha.imag_at(l as isize - k as isize));
                        }
                        acc += inner * (trapezoid_weight::<T>(l, j, i) * s(l - j) * dt);
                    }
                    (free, -acc * (pref * dt))
                }
            };
            let r = (y[j] - free - coupled).norm();
            worst = worst.max(r);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{correlation, DriveProfile, SpectralDensity};

    fn drude_setup(n: usize, t_max: f64) -> (BathCorrelation<f64>, SystemParams<f64>, TimeGrid<f64>) {
        let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
        let grid = TimeGrid::new(t_max, n).unwrap();
        let alpha = correlation(&sd, 1.0, &grid).unwrap();
        let sys = SystemParams::from_renormalized(1.0, 1.0, 1.0, &sd).unwrap();
        (alpha, sys, grid)
    }

    fn free_setup(n: usize) -> (BathCorrelation<f64>, SystemParams<f64>, TimeGrid<f64>) {
        let grid = TimeGrid::new(4.0, n).unwrap();
        let sd = SpectralDensity::zero();
        let sys = SystemParams::from_renormalized(1.5, 1.3, 1.0, &sd).unwrap();
        (BathCorrelation::zero(grid), sys, grid)
    }

    #[test]
    fn zero_kernel_gives_free_oscillator_tables() {
        let (alpha, sys, grid) = free_setup(40);
        let k = solve_kernels(&alpha, &sys, &grid).unwrap();
        let (m, w) = (1.5_f64, 1.3_f64);
        for i in 0..grid.len() {
            for j in 0..=i {
                let tau = grid.time(i) - grid.time(j);
                assert!((k.x11.get(i, j) - cplx(0.0, (w * tau).sin() / (m * w))).norm() < 1e-14);
                assert!((k.x12.get(i, j) - cplx(0.0, -(w * tau).cos())).norm() < 1e-14);
                assert!((k.x21.get(i, j) - cplx((w * tau).cos(), 0.0)).norm() < 1e-14);
                assert!((k.x22.get(i, j) - cplx(-(w * tau).sin() / (m * w), 0.0)).norm() < 1e-14);
                assert_eq!(k.x23.get(i, j).norm(), 0.0);
                assert_eq!(k.x24.get(i, j).norm(), 0.0);
                assert_eq!(k.x25.get(i, j).norm(), 0.0);
            }
        }
    }

    #[test]
    fn endpoints_hold_for_any_bath() {
        let (alpha, sys, grid) = drude_setup(30, 3.0);
        let k = solve_kernels(&alpha, &sys, &grid).unwrap();
        for t in k.tables() {
            for i in 0..grid.len() {
                assert!((t.get(i, i) - t.kind().endpoint::<f64>()).norm() < 1e-15, "{:?}", t.kind());
                assert_eq!(t.get(i, i + 1).norm(), 0.0);
            }
        }
    }

    #[test]
    fn constant_force_without_memory_matches_closed_form() {
        let grid = TimeGrid::new(4.0, 400).unwrap();
        let sd = SpectralDensity::zero();
        let c = 0.7;
        let sys = SystemParams::from_renormalized(2.0, 1.2, 1.0, &sd)
            .unwrap()
            .with_drive(DriveProfile::Constant { value: c }, DriveProfile::Zero)
            .unwrap();
        let x25 = solve_x25(&BathCorrelation::zero(grid), &sys, &grid).unwrap();
        let (m, w) = (2.0_f64, 1.2_f64);
        let mut err: f64 = 0.0;
        for i in 0..grid.len() {
            for j in 0..=i {
                let tau = grid.time(i) - grid.time(j);
                let exact = -2.0 * c / (m * w * w) * (1.0 - (w * tau).cos());
                err = err.max((x25.get(i, j) - cplx(exact, 0.0)).norm());
            }
        }
        // trapezoid error bound (dt^2 / 12) t_max max|f''| with f'' = 2 c w / M
        let bound = 0.01f64.powi(2) / 12.0 * 4.0 * 2.0 * c * w / m;
        assert!(err < bound, "{err} vs {bound}");
    }

    #[test]
    fn discrete_equations_are_satisfied() {
        let (alpha, sys, grid) = drude_setup(24, 3.0);
        let sys = sys
            .with_drive(
                DriveProfile::Harmonic {
                    amplitude: 0.3,
                    frequency: 0.8,
                    phase: 0.1,
                },
                DriveProfile::Constant { value: -0.2 },
            )
            .unwrap();
        let k = solve_kernels(&alpha, &sys, &grid).unwrap();
        for t in k.tables() {
            let r = residual(t, &alpha, &sys, Some((&k.x11, &k.x12)));
            assert!(r < 1e-10, "{:?} residual {r}", t.kind());
        }
    }

    #[test]
    fn reality_structure() {
        let (alpha, sys, grid) = drude_setup(40, 4.0);
        let sys = sys
            .with_drive(DriveProfile::Constant { value: 0.5 }, DriveProfile::Zero)
            .unwrap();
        let k = solve_kernels(&alpha, &sys, &grid).unwrap();
        for t in k.tables() {
            assert!(t.reality_defect() <= 1e-12, "{:?}", t.kind());
        }
    }

    #[test]
    fn separate_solvers_agree_with_shared_factorization() {
        let (alpha, sys, grid) = drude_setup(20, 2.0);
        let k = solve_kernels(&alpha, &sys, &grid).unwrap();
        let (x11, x12) = solve_x11_x12(&alpha, &sys, &grid).unwrap();
        let (x21, x22) = solve_x21_x22(&alpha, &sys, &grid).unwrap();
        let (x23, x24) = solve_x23_x24(&alpha, &x11, &x12, &sys, &grid).unwrap();
        assert_eq!(x11, k.x11);
        assert_eq!(x21, k.x21);
        assert_eq!(x22, k.x22);
        assert_eq!(x23, k.x23);
        assert_eq!(x24, k.x24);
    }

    #[test]
    fn rejects_mismatched_grid() {
        let (alpha, sys, _) = drude_setup(20, 2.0);
        let other = TimeGrid::new(2.0, 21).unwrap();
        assert!(solve_x11_x12(&alpha, &sys, &other).is_err());
    }

    #[test]
    fn csv_has_one_line_per_entry() {
        let (alpha, sys, grid) = free_setup(3);
        let (x11, _) = solve_x11_x12(&alpha, &sys, &grid).unwrap();
        let mut buf = Vec::new();
        x11.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 10);
        assert!(s.starts_with("i,j,t_i,t_j,re,im\n"));
    }
}
