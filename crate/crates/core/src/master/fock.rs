//! Density matrices in the truncated number basis of the renormalized
//! oscillator and their propagation under the master equation.

use std::io::Write;

use log::warn;
use nalgebra::{Complex as NaComplex, DMatrix};

use crate::bath::SystemParams;
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::io::fmt_num;
use crate::master::coefficients::{CoefficientSet, Coefficients};
use crate::master::moments::GaussianState;
use crate::scalar::{Cplx, Real};

/// Populations of the two highest levels above this trigger a truncation
/// warning.
pub const LEAKAGE_LIMIT: f64 = 1e-6;

/// Row-major `N_f x N_f` complex matrix in the number basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T> {
    dim: usize,
    data: Vec<Cplx<T>>,
}

fn czero<T: Real>() -> Cplx<T> {
    Cplx::new(T::zero(), T::zero())
}

impl<T: Real> DensityMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![czero(); dim * dim],
        }
    }

    pub fn from_data(dim: usize, data: Vec<Cplx<T>>) -> Result<Self> {
        if data.len() != dim * dim || dim < 2 {
            return Err(invalid("rho", format!("need {dim}x{dim} >= 2x2 entries, got {}", data.len())));
        }
        Ok(Self { dim, data })
    }

    /// Number state `|n><n|`.
    pub fn fock(dim: usize, n: usize) -> Result<Self> {
        if n >= dim {
            return Err(invalid("n", format!("level {n} outside a basis of {dim} states")));
        }
        let mut r = Self::zeros(dim);
        r[(n, n)] = Cplx::new(T::one(), T::zero());
        Ok(r)
    }

    /// Coherent state with mean position `x0` and momentum `p0`,
    /// renormalized after truncation.
    pub fn coherent(dim: usize, mass: T, omega: T, x0: T, p0: T) -> Self {
        let alpha = displacement(mass, omega, x0, p0);
        let mut amp = vec![czero::<T>(); dim];
        amp[0] = Cplx::new((-alpha.norm_sqr() / T::lit(2.0)).exp(), T::zero());
        for n in 1..dim {
            amp[n] = amp[n - 1] * alpha / T::from_count(n).sqrt();
        }
        let mut r = Self::zeros(dim);
        for m in 0..dim {
            for n in 0..dim {
                r[(m, n)] = amp[m] * amp[n].conj();
            }
        }
        r.normalize();
        r
    }

    /// Thermal state with mean occupation `nbar`, renormalized after
    /// truncation.
    pub fn thermal(dim: usize, nbar: T) -> Self {
        let mut r = Self::zeros(dim);
        let q = nbar / (T::one() + nbar);
        let mut p = T::one() / (T::one() + nbar);
        for n in 0..dim {
            r[(n, n)] = Cplx::new(p, T::zero());
            p *= q;
        }
        r.normalize();
        r
    }

    /// Thermal state displaced to mean position `x0` and momentum `p0`.
    pub fn displaced_thermal(dim: usize, mass: T, omega: T, nbar: T, x0: T, p0: T) -> Self {
        let alpha = displacement(mass, omega, x0, p0);
        let d = displacement_matrix(dim, alpha);
        let th = Self::thermal(dim, nbar);
        let mut r = Self::zeros(dim);
        for m in 0..dim {
            for n in 0..dim {
                let mut s = czero();
                for k in 0..dim {
                    s += d[m * dim + k] * th[(k, k)] * d[n * dim + k].conj();
                }
                r[(m, n)] = s;
            }
        }
        r.normalize();
        r
    }

    /// Density matrix of a Gaussian state that is a displaced thermal
    /// state of the oscillator (`var_xx = (2 nbar + 1)/(2 M w)`, no
    /// squeezing).
    pub fn from_gaussian(dim: usize, mass: T, omega: T, g: &GaussianState<T>) -> Result<Self> {
        let nbar = (g.var_xx * mass * omega - T::lit(0.5)).max(T::zero());
        let expect_pp = (T::lit(2.0) * nbar + T::one()) * mass * omega / T::lit(2.0);
        let tol = T::lit(1e-10) * (T::one() + expect_pp);
        if (g.var_pp - expect_pp).abs() > tol || g.cov_xp.abs() > tol {
            return Err(invalid(
                "initial state",
                "only unsqueezed (displaced thermal) Gaussian states map onto the number basis",
            ));
        }
        Ok(Self::displaced_thermal(dim, mass, omega, nbar, g.mean_x, g.mean_p))
    }

    fn normalize(&mut self) {
        let tr = self.trace().re;
        for z in &mut self.data {
            *z /= tr;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[Cplx<T>] {
        &self.data
    }

    pub fn trace(&self) -> Cplx<T> {
        (0..self.dim).map(|n| self[(n, n)]).fold(czero(), |a, b| a + b)
    }

    /// `max |rho - rho^dagger|`.
    pub fn hermiticity_defect(&self) -> T {
        let mut worst = T::zero();
        for m in 0..self.dim {
            for n in m..self.dim {
                worst = worst.max((self[(m, n)] - self[(n, m)].conj()).norm());
            }
        }
        worst
    }

    pub fn population(&self, n: usize) -> T {
        self[(n, n)].re
    }

    /// Combined population of the two highest levels.
    pub fn top_population(&self) -> T {
        let d = self.dim;
        self.population(d - 1) + self.population(d - 2)
    }

    /// Smallest eigenvalue of the hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim;
        let m = DMatrix::from_fn(d, d, |r, c| {
            let z = (self[(r, c)] + self[(c, r)].conj()) / T::lit(2.0);
            NaComplex::new(z.re.to_f64_lossy(), z.im.to_f64_lossy())
        });
        m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `(<a>, <a^2>, <a^dagger a>)` with the untruncated ladder operators.
    fn ladder_expectations(&self) -> (Cplx<T>, Cplx<T>, T) {
        let mut a = czero();
        let mut a2 = czero();
        let mut n = T::zero();
        for k in 0..self.dim {
            n += T::from_count(k) * self[(k, k)].re;
            if k + 1 < self.dim {
                a += self[(k + 1, k)] * T::from_count(k + 1).sqrt();
            }
            if k + 2 < self.dim {
                a2 += self[(k + 2, k)] * (T::from_count(k + 1) * T::from_count(k + 2)).sqrt();
            }
        }
        (a, a2, n)
    }

    /// First and symmetrized second central moments of `x` and `p`,
    /// normalized by the trace.
    pub fn moments(&self, mass: T, omega: T) -> GaussianState<T> {
        let tr = self.trace().re;
        let (a, a2, n) = self.ladder_expectations();
        let (a, a2, n) = (a / tr, a2 / tr, n / tr);
        let two = T::lit(2.0);
        let mw = mass * omega;
        let mean_x = two * a.re / (two * mw).sqrt();
        let mean_p = (two * mw).sqrt() * a.im;
        let xx = (two * n + T::one() + two * a2.re) / (two * mw);
        let pp = mw / two * (two * n + T::one() - two * a2.re);
        let sym = a2.im;
        GaussianState {
            mean_x,
            mean_p,
            var_xx: xx - mean_x * mean_x,
            var_pp: pp - mean_p * mean_p,
            cov_xp: sym - mean_x * mean_p,
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DensityMatrix<T> {
    type Output = Cplx<T>;
    fn index(&self, (r, c): (usize, usize)) -> &Cplx<T> {
        &self.data[r * self.dim + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DensityMatrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Cplx<T> {
        &mut self.data[r * self.dim + c]
    }
}

/// `alpha = sqrt(M w / 2) x0 + i p0 / sqrt(2 M w)`.
pub fn displacement<T: Real>(mass: T, omega: T, x0: T, p0: T) -> Cplx<T> {
    let mw = mass * omega;
    let two = T::lit(2.0);
    Cplx::new((mw / two).sqrt() * x0, p0 / (two * mw).sqrt())
}

/// Generalized Laguerre polynomial `L_n^(k)(x)` by recurrence.
fn laguerre<T: Real>(n: usize, k: usize, x: T) -> T {
    let kf = T::from_count(k);
    let mut l0 = T::one();
    if n == 0 {
        return l0;
    }
    let mut l1 = T::one() + kf - x;
    for j in 1..n {
        let jf = T::from_count(j);
        let l2 = ((T::lit(2.0) * jf + T::one() + kf - x) * l1 - (jf + kf) * l0) / (jf + T::one());
        l0 = l1;
        l1 = l2;
    }
    l1
}

/// Untruncated matrix elements `<m|D(alpha)|n>` for `m, n < dim`.
fn displacement_matrix<T: Real>(dim: usize, alpha: Cplx<T>) -> Vec<Cplx<T>> {
    let x = alpha.norm_sqr();
    let env = (-x / T::lit(2.0)).exp();
    // ln(n!) table
    let mut lnf = vec![T::zero(); dim];
    for n in 1..dim {
        lnf[n] = lnf[n - 1] + T::from_count(n).ln();
    }
    let mut d = vec![czero(); dim * dim];
    for m in 0..dim {
        for n in 0..dim {
            let (lo, hi) = if m >= n { (n, m) } else { (m, n) };
            let base = if m >= n { alpha } else { -alpha.conj() };
            let ratio = ((lnf[lo] - lnf[hi]) / T::lit(2.0)).exp();
            d[m * dim + n] = base.powu((hi - lo) as u32) * (ratio * env * laguerre(lo, hi - lo, x));
        }
    }
    d
}

/// `x` and `p` as tridiagonal matrices in the number basis: entries
/// `(n, n+1)` and `(n+1, n)`.
#[derive(Debug, Clone)]
pub(crate) struct Ladder<T> {
    x_up: Vec<T>,
    p_up: Vec<T>,
}

impl<T: Real> Ladder<T> {
    fn new(dim: usize, mass: T, omega: T) -> Self {
        let mw = mass * omega;
        let two = T::lit(2.0);
        let x_up = (1..dim).map(|n| (T::from_count(n) / (two * mw)).sqrt()).collect();
        // p_{n,n+1} = -i sqrt(M w n / 2), stored without the -i
        let p_up = (1..dim).map(|n| (mw * T::from_count(n) / two).sqrt()).collect();
        Self { x_up, p_up }
    }
}

/// Interaction-picture tridiagonal operator: upper entries `u[n]` at
/// `(n, n+1)` and lower entries `l[n]` at `(n+1, n)`.
pub(crate) struct Tri<T> {
    u: Vec<Cplx<T>>,
    l: Vec<Cplx<T>>,
}

impl<T: Real> Tri<T> {
    /// `op * rho`.
    pub(crate) fn left(&self, rho: &[Cplx<T>], out: &mut [Cplx<T>], d: usize) {
        for m in 0..d {
            let row = &mut out[m * d..(m + 1) * d];
            row.iter_mut().for_each(|z| *z = czero());
            if m > 0 {
                let c = self.l[m - 1];
                let src = &rho[(m - 1) * d..m * d];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += c * *s;
                }
            }
            if m + 1 < d {
                let c = self.u[m];
                let src = &rho[(m + 1) * d..(m + 2) * d];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += c * *s;
                }
            }
        }
    }

    /// `rho * op`.
    pub(crate) fn right(&self, rho: &[Cplx<T>], out: &mut [Cplx<T>], d: usize) {
        for m in 0..d {
            let src = &rho[m * d..(m + 1) * d];
            let row = &mut out[m * d..(m + 1) * d];
            for k in 0..d {
                let mut s = czero();
                if k > 0 {
                    s += src[k - 1] * self.u[k - 1];
                }
                if k + 1 < d {
                    s += src[k + 1] * self.l[k];
                }
                row[k] = s;
            }
        }
    }
}

/// Master-equation right-hand side in the interaction picture of
/// `H0 = w (n + 1/2)`.
pub(crate) struct Generator<T> {
    d: usize,
    omega: T,
    ladder: Ladder<T>,
    scratch: [Vec<Cplx<T>>; 5],
}

impl<T: Real> Generator<T> {
    pub(crate) fn new(d: usize, mass: T, omega: T) -> Self {
        let z = vec![czero(); d * d];
        Self {
            d,
            omega,
            ladder: Ladder::new(d, mass, omega),
            scratch: [z.clone(), z.clone(), z.clone(), z.clone(), z],
        }
    }

    pub(crate) fn operators(&self, t: T) -> (Tri<T>, Tri<T>) {
        // (op_I)_{n,n+1} = op_{n,n+1} e^{-i w t}
        let (s, c) = (self.omega * t).sin_cos();
        let ph = Cplx::new(c, -s);
        let x = Tri {
            u: self.ladder.x_up.iter().map(|&v| ph * v).collect(),
            l: self.ladder.x_up.iter().map(|&v| ph.conj() * v).collect(),
        };
        // p_{n,n+1} = -i v, p_{n+1,n} = +i v
        let mi = Cplx::new(T::zero(), -T::one());
        let p = Tri {
            u: self.ladder.p_up.iter().map(|&v| mi * ph * v).collect(),
            l: self.ladder.p_up.iter().map(|&v| -(mi * ph.conj()) * v).collect(),
        };
        (x, p)
    }

    /// `d rho_I / dt` for coefficients `c` and drives `(f1, f2)`.
    fn apply(&mut self, t: T, rho: &[Cplx<T>], c: &Coefficients<T>, f1: T, f2: T, out: &mut [Cplx<T>]) {
        let d = self.d;
        let (x, p) = self.operators(t);
        let [xr, rx, pr, rp, q] = &mut self.scratch;
        let zero = T::zero();
        let force = f1 + c.shift;
        let need_p = c.a2 != zero || c.a3 != zero || f2 != zero;
        x.left(rho, xr, d);
        x.right(rho, rx, d);
        if need_p {
            p.left(rho, pr, d);
            p.right(rho, rp, d);
        }
        let i = Cplx::new(zero, T::one());
        // Q = A1 {x,rho} + A2 {p,rho} + i a3 [p,rho] + i a4 [x,rho]
        for k in 0..d * d {
            let mut v = czero();
            if c.a1 != zero {
                v += (xr[k] + rx[k]) * c.a1;
            }
            if c.a4 != zero {
                v += i * (xr[k] - rx[k]) * c.a4;
            }
            if need_p {
                if c.a2 != zero {
                    v += (pr[k] + rp[k]) * c.a2;
                }
                if c.a3 != zero {
                    v += i * (pr[k] - rp[k]) * c.a3;
                }
            }
            q[k] = v;
        }
        // out = -i ( [V, rho] + [x, Q] ),  V = force x + f2 p
        x.left(q, pr, d);
        x.right(q, rp, d);
        for k in 0..d * d {
            let mut v = pr[k] - rp[k];
            if force != zero {
                v += (xr[k] - rx[k]) * force;
            }
            out[k] = -i * v;
        }
        if f2 != zero {
            p.left(rho, pr, d);
            p.right(rho, rp, d);
            for k in 0..d * d {
                out[k] += -i * (pr[k] - rp[k]) * f2;
            }
        }
    }
}

/// Number of equal substeps per grid interval: step at most `dt`,
/// `0.05 / w` and `1 / lambda`, where `lambda` bounds the generator norm.
pub fn substeps<T: Real>(coeffs: &CoefficientSet<T>, sys: &SystemParams<T>, dim: usize) -> usize {
    let grid = coeffs.grid();
    let dt = grid.dt();
    let m = sys.mass();
    let w = sys.renormalized_frequency();
    let nf = T::from_count(dim);
    let x2 = T::lit(2.0) * nf / (m * w);
    let p2 = T::lit(2.0) * nf * m * w;
    let xp = T::lit(2.0) * nf;
    let mut lam = T::zero();
    let f1 = sys.drive_f1();
    let f2 = sys.drive_f2();
    for k in 0..grid.len() {
        let c = coeffs.at_node(k);
        if !coeffs.valid()[k] {
            continue;
        }
        let t = grid.time(k);
        let l = T::lit(4.0) * ((c.a1.abs() + c.a4.abs()) * x2 + (c.a2.abs() + c.a3.abs()) * xp)
            + T::lit(2.0) * ((f1.value(t) + c.shift).abs() * x2.sqrt() + f2.value(t).abs() * p2.sqrt());
        lam = lam.max(l);
    }
    let mut h = dt.min(T::lit(0.05) / w);
    if lam > T::zero() {
        h = h.min(T::one() / lam);
    }
    (dt / h).ceil().to_f64_lossy().max(1.0) as usize
}

/// Density matrices at every grid node plus diagnostics.
#[derive(Debug, Clone)]
pub struct FockEvolution<T> {
    pub grid: TimeGrid<T>,
    pub states: Vec<DensityMatrix<T>>,
    /// Smallest eigenvalue of the hermitian part at each node (empty when
    /// not requested).
    pub min_eigenvalues: Vec<f64>,
    /// `(t, top-two population)` at nodes where it exceeded
    /// [`LEAKAGE_LIMIT`].
    pub leakage: Vec<(f64, f64)>,
    pub substeps: usize,
    mass: T,
    omega: T,
}

impl<T: Real> FockEvolution<T> {
    pub fn moments(&self) -> Vec<GaussianState<T>> {
        self.states.iter().map(|r| r.moments(self.mass, self.omega)).collect()
    }

    pub fn max_trace_drift(&self) -> T {
        self.states
            .iter()
            .fold(T::zero(), |m, r| m.max((r.trace() - Cplx::new(T::one(), T::zero())).norm()))
    }

    pub fn max_hermiticity_defect(&self) -> T {
        self.states.iter().fold(T::zero(), |m, r| m.max(r.hermiticity_defect()))
    }

    /// CSV with columns `t, mean_x, mean_p, var_xx, var_pp, cov_xp`.
    pub fn write_moments_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        super::moments::write_moment_rows(w, &self.grid, &self.moments())
    }

    /// Full matrices at the requested node indices, one row per entry:
    /// `t, m, n, re, im`.
    pub fn write_snapshots_csv<W: Write>(&self, mut w: W, nodes: &[usize]) -> std::io::Result<()> {
        writeln!(w, "t,m,n,re,im")?;
        for &k in nodes {
            let Some(r) = self.states.get(k) else { continue };
            let t = fmt_num(self.grid.time(k));
            for m in 0..r.dim() {
                for n in 0..r.dim() {
                    let z = r[(m, n)];
                    writeln!(w, "{t},{m},{n},{},{}", fmt_num(z.re), fmt_num(z.im))?;
                }
            }
        }
        Ok(())
    }
}

/// Options for [`propagate_fock_with`].
#[derive(Debug, Clone, Copy)]
pub struct FockOptions {
    pub track_min_eigenvalue: bool,
    /// Overrides the automatic substep count.
    pub substeps: Option<usize>,
}

impl Default for FockOptions {
    fn default() -> Self {
        Self {
            track_min_eigenvalue: true,
            substeps: None,
        }
    }
}

/// Integrates the master equation with the Hamiltonian `H_s(t) + shift(t) x`
/// from `rho0` over the coefficient grid.
pub fn propagate_fock<T: Real>(
    rho0: &DensityMatrix<T>,
    coeffs: &CoefficientSet<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<FockEvolution<T>> {
    propagate_fock_with(rho0, coeffs, sys, grid, FockOptions::default())
}

pub fn propagate_fock_with<T: Real>(
    rho0: &DensityMatrix<T>,
    coeffs: &CoefficientSet<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    opts: FockOptions,
) -> Result<FockEvolution<T>> {
    coeffs.grid().ensure_same(grid, "coefficients vs propagation grid")?;
    coeffs.ensure_valid()?;
    let d = rho0.dim();
    if d < 2 {
        return Err(invalid("n_fock", "need at least two levels"));
    }
    let m = sys.mass();
    let w = sys.renormalized_frequency();
    let n_sub = opts.substeps.unwrap_or_else(|| substeps(coeffs, sys, d)).max(1);
    let h = grid.dt() / T::from_count(n_sub);
    let f1 = sys.drive_f1();
    let f2 = sys.drive_f2();
    let mut gen = Generator::new(d, m, w);

    let mut rho_i = rho0.data.clone();
    let mut states = Vec::with_capacity(grid.len());
    let mut min_eigs = Vec::new();
    let mut leakage = Vec::new();
    let zero = vec![czero::<T>(); d * d];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (zero.clone(), zero.clone(), zero.clone(), zero.clone(), zero);
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let coeff_at = |t: T| -> Result<(Coefficients<T>, T, T)> {
        Ok((coeffs.at(t)?, f1.value(t), f2.value(t)))
    };

    let record = |rho_i: &[Cplx<T>], t: T, states: &mut Vec<DensityMatrix<T>>,
                  min_eigs: &mut Vec<f64>, leakage: &mut Vec<(f64, f64)>| {
        let r = to_schrodinger(rho_i, d, w, t);
        let top = r.top_population().to_f64_lossy();
        if top > LEAKAGE_LIMIT {
            if leakage.is_empty() {
                warn!(
                    "Fock truncation leakage at t = {}: top two levels hold {top:e} (populations {:e}, {:e})",
                    t.to_f64_lossy(),
                    r.population(d - 2).to_f64_lossy(),
                    r.population(d - 1).to_f64_lossy()
                );
            }
            leakage.push((t.to_f64_lossy(), top));
        }
        if opts.track_min_eigenvalue {
            min_eigs.push(r.min_eigenvalue());
        }
        states.push(r);
    };

    record(&rho_i, T::zero(), &mut states, &mut min_eigs, &mut leakage);
    for step in 0..grid.n_steps() {
        let t0 = grid.time(step);
        for s in 0..n_sub {
            let t = t0 + T::from_count(s) * h;
            let (c0, a0, b0) = coeff_at(t)?;
            let (ch, ah, bh) = coeff_at(t + half * h)?;
            let (c1, a1, b1) = coeff_at(t + h)?;
            gen.apply(t, &rho_i, &c0, a0, b0, &mut k1);
            for k in 0..d * d {
                tmp[k] = rho_i[k] + k1[k] * (half * h);
            }
            gen.apply(t + half * h, &tmp, &ch, ah, bh, &mut k2);
            for k in 0..d * d {
                tmp[k] = rho_i[k] + k2[k] * (half * h);
            }
            gen.apply(t + half * h, &tmp, &ch, ah, bh, &mut k3);
            for k in 0..d * d {
                tmp[k] = rho_i[k] + k3[k] * h;
            }
            gen.apply(t + h, &tmp, &c1, a1, b1, &mut k4);
            for k in 0..d * d {
                rho_i[k] += (k1[k] + (k2[k] + k3[k]) * T::lit(2.0) + k4[k]) * (h * sixth);
            }
        }
        if rho_i.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Degenerate {
                t: grid.time(step + 1).to_f64_lossy(),
                reason: "density matrix became non-finite".into(),
            });
        }
        record(&rho_i, grid.time(step + 1), &mut states, &mut min_eigs, &mut leakage);
    }
    Ok(FockEvolution {
        grid: *grid,
        states,
        min_eigenvalues: min_eigs,
        leakage,
        substeps: n_sub,
        mass: m,
        omega: w,
    })
}

/// `rho_{mn} = exp(-i w (m - n) t) rho_I_{mn}`.
pub(crate) fn to_schrodinger<T: Real>(rho_i: &[Cplx<T>], d: usize, w: T, t: T) -> DensityMatrix<T> {
    let (s, c) = (w * t).sin_cos();
    let ph = Cplx::new(c, -s);
    // phases e^{-i w k t} for k = -(d-1)..(d-1)
    let mut pos = vec![Cplx::new(T::one(), T::zero()); d];
    for k in 1..d {
        pos[k] = pos[k - 1] * ph;
    }
    let mut out = DensityMatrix::zeros(d);
    for m in 0..d {
        for n in 0..d {
            let f = if m >= n { pos[m - n] } else { pos[n - m].conj() };
            out[(m, n)] = rho_i[m * d + n] * f;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{correlation, DriveProfile, SpectralDensity};
    use crate::master::coefficients::{assemble_coefficients, markovian_coefficients};
    use crate::master::moments::propagate_moments_with;
    use crate::volterra::solve_kernels;
    use proptest::prelude::*;

    fn free_sys(m: f64, w: f64) -> SystemParams<f64> {
        SystemParams::from_renormalized(m, w, 1.0, &SpectralDensity::zero()).unwrap()
    }

    #[test]
    fn coherent_state_moments() {
        let (m, w) = (1.3_f64, 0.7_f64);
        let r = DensityMatrix::coherent(40, m, w, 0.4, -0.2);
        let g = r.moments(m, w);
        assert!((g.mean_x - 0.4).abs() < 1e-12);
        assert!((g.mean_p + 0.2).abs() < 1e-12);
        assert!((g.var_xx - 1.0 / (2.0 * m * w)).abs() < 1e-12);
        assert!((g.var_pp - m * w / 2.0).abs() < 1e-12);
        assert!(g.cov_xp.abs() < 1e-12);
    }

    #[test]
    fn displaced_thermal_moments() {
        let (m, w, nbar) = (1.0_f64, 1.0_f64, 0.3_f64);
        let r = DensityMatrix::displaced_thermal(40, m, w, nbar, 0.5, 0.25);
        let g = r.moments(m, w);
        let exact = GaussianState::thermal(m, w, nbar, 0.5, 0.25);
        assert!(g.max_abs_diff(&exact) < 1e-10, "{g:?}");
        assert!((r.trace().re - 1.0).abs() < 1e-14);
        assert!(r.hermiticity_defect() < 1e-14);
    }

    #[test]
    fn free_evolution_follows_ehrenfest() {
        let (m, w) = (1.0, 1.0);
        let sys = free_sys(m, w);
        let grid = TimeGrid::new(4.0 * std::f64::consts::PI, 200).unwrap();
        let c = markovian_coefficients(0.0, 0.0, &grid);
        let (x0, p0) = (0.6, 0.2);
        let r0 = DensityMatrix::coherent(30, m, w, x0, p0);
        let ev = propagate_fock(&r0, &c, &sys, &grid).unwrap();
        for (k, g) in ev.moments().iter().enumerate() {
            let t = grid.time(k);
            assert!((g.mean_x - (x0 * t.cos() + p0 * t.sin() / (m * w))).abs() < 1e-8);
        }
    }

    #[test]
    fn trace_and_hermiticity_are_preserved() {
        let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
        let grid = TimeGrid::new(6.0, 120).unwrap();
        let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
        let alpha = correlation(&sd, 1.0, &grid).unwrap();
        let c = assemble_coefficients(&solve_kernels(&alpha, &sys, &grid).unwrap(), &alpha, &grid).unwrap();
        let r0 = DensityMatrix::fock(20, 1).unwrap();
        let ev = propagate_fock(&r0, &c, &sys, &grid).unwrap();
        assert!(ev.max_trace_drift() < 1e-12);
        assert!(ev.max_hermiticity_defect() < 1e-12);
        assert_eq!(ev.min_eigenvalues.len(), grid.len());
    }

    #[test]
    fn fock_and_moment_routes_agree() {
        let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
        let grid = TimeGrid::new(5.0, 100).unwrap();
        let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd)
            .unwrap()
            .with_drive(DriveProfile::Constant { value: 0.1 }, DriveProfile::Constant { value: -0.05 })
            .unwrap();
        let alpha = correlation(&sd, 1.0, &grid).unwrap();
        let c = assemble_coefficients(&solve_kernels(&alpha, &sys, &grid).unwrap(), &alpha, &grid).unwrap();
        let w = sys.renormalized_frequency();
        let g0 = GaussianState::coherent(1.0, w, 0.3, 0.1);
        let r0 = DensityMatrix::from_gaussian(40, 1.0, w, &g0).unwrap();
        let ev = propagate_fock(&r0, &c, &sys, &grid).unwrap();
        let mo = propagate_moments_with(&g0, &c, &sys, &grid, ev.substeps).unwrap();
        for (a, b) in ev.moments().iter().zip(&mo) {
            assert!(a.max_abs_diff(b) < 1e-8, "{a:?} {b:?}");
        }
    }

    #[test]
    fn leakage_is_reported() {
        let (m, w) = (1.0, 1.0);
        let sys = free_sys(m, w)
            .with_drive(DriveProfile::Constant { value: -3.0 }, DriveProfile::Zero)
            .unwrap();
        let grid = TimeGrid::new(3.0, 30).unwrap();
        let c = markovian_coefficients(0.0, 0.0, &grid);
        let r0 = DensityMatrix::fock(8, 0).unwrap();
        let ev = propagate_fock(&r0, &c, &sys, &grid).unwrap();
        assert!(!ev.leakage.is_empty());
    }

    #[test]
    fn masked_coefficients_are_refused() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let z = Cplx::new(0.0, 0.0);
        let c = CoefficientSet::from_complex(
            grid,
            [vec![z; 3], vec![z; 3], vec![z; 3], vec![z; 3]],
            vec![0.0; 3],
            vec![true, false, true],
        )
        .unwrap();
        let r0 = DensityMatrix::fock(4, 0).unwrap();
        assert!(matches!(
            propagate_fock(&r0, &c, &free_sys(1.0, 1.0), &grid),
            Err(Error::MaskedInterval { .. })
        ));
    }

    fn random_matrix(d: usize, vals: &[f64]) -> Vec<Cplx<f64>> {
        (0..d * d).map(|k| Cplx::new(vals[2 * k], vals[2 * k + 1])).collect()
    }

    fn dense(t: &Tri<f64>, d: usize) -> Vec<Cplx<f64>> {
        let mut id = vec![Cplx::new(0.0, 0.0); d * d];
        for k in 0..d {
            id[k * d + k] = Cplx::new(1.0, 0.0);
        }
        let mut out = id.clone();
        t.left(&id, &mut out, d);
        out
    }

    fn matmul(a: &[Cplx<f64>], b: &[Cplx<f64>], d: usize) -> Vec<Cplx<f64>> {
        let mut c = vec![Cplx::new(0.0, 0.0); d * d];
        for i in 0..d {
            for k in 0..d {
                for j in 0..d {
                    c[i * d + j] += a[i * d + k] * b[k * d + j];
                }
            }
        }
        c
    }

    proptest! {
        #[test]
        fn frequency_shift_term_is_a_commutator_with_x_squared(
            vals in proptest::collection::vec(-1.0f64..1.0, 2 * 36),
            t in 0.0f64..10.0,
        ) {
            // [x, {x, rho}] = [x^2, rho] for any rho
            let d = 6;
            let rho = random_matrix(d, &vals);
            let gen = Generator::new(d, 1.2, 0.8);
            let (x, _) = gen.operators(t);
            let xm = dense(&x, d);
            let x2 = matmul(&xm, &xm, d);
            let xr = matmul(&xm, &rho, d);
            let rx = matmul(&rho, &xm, d);
            let anti: Vec<_> = xr.iter().zip(&rx).map(|(a, b)| a + b).collect();
            let lhs: Vec<_> = matmul(&xm, &anti, d).iter().zip(matmul(&anti, &xm, d)).map(|(a, b)| a - b).collect();
            let rhs: Vec<_> = matmul(&x2, &rho, d).iter().zip(matmul(&rho, &x2, d)).map(|(a, b)| a - b).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn generator_is_traceless_and_hermiticity_preserving(
            vals in proptest::collection::vec(-1.0f64..1.0, 2 * 25),
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            t in 0.0f64..10.0,
        ) {
            let d = 5;
            let mut rho = random_matrix(d, &vals);
            // hermitize
            for m in 0..d {
                for n in 0..m {
                    rho[n * d + m] = rho[m * d + n].conj();
                }
                rho[m * d + m].im = 0.0;
            }
            let c = Coefficients { a1: a[0], a2: a[1], a3: a[2], a4: a[3], shift: a[4] };
            let mut gen = Generator::new(d, 1.0, 1.1);
            let mut out = vec![Cplx::new(0.0, 0.0); d * d];
            gen.apply(t, &rho, &c, 0.3, -0.2, &mut out);
            let tr: Cplx<f64> = (0..d).map(|k| out[k * d + k]).sum();
            prop_assert!(tr.norm() < 1e-12);
            for m in 0..d {
                for n in 0..d {
                    prop_assert!((out[m * d + n] - out[n * d + m].conj()).norm() < 1e-12);
                }
            }
        }
    }
}
