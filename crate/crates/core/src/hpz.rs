//! Second construction of the coefficients from boundary-value u-functions
//! and Green's functions of the memory equation
//! `v'' + w^2 v + (2/M) int_0^t alpha_I(t - s) v(s) ds = 0`.

use rayon::prelude::*;

use crate::bath::{BathCorrelation, SystemParams};
use crate::error::{Error, Result};
use crate::grid::{trapezoid_weight, TimeGrid};
use crate::master::CoefficientSet;
use crate::scalar::{Cplx, Real};

/// Relative size below which `v2(t)` or the boundary determinant counts as
/// zero.
pub const DEGENERACY_THRESHOLD: f64 = 1e-6;

/// Initial-value solutions `v1` (`v1(0) = 1, v1'(0) = 0`) and `v2`
/// (`v2(0) = 0, v2'(0) = 1`) on the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalSolutions<T> {
    grid: TimeGrid<T>,
    pub v1: Vec<T>,
    pub v1_dot: Vec<T>,
    pub v2: Vec<T>,
    pub v2_dot: Vec<T>,
}

/// `(2/M) dt sum_k w_k alpha_I(t_n - t_k) v_k` over `[0, t_n]`. The node
/// `k = n` drops out because `alpha_I(0) = 0`.
fn memory<T: Real>(alpha: &BathCorrelation<T>, v: &[T], n: usize, scale: T) -> T {
    if n == 0 {
        return T::zero();
    }
    let a = alpha.alpha_i();
    let mut s = T::lit(0.5) * a[n] * v[0];
    for k in 1..n {
        s += a[n - k] * v[k];
    }
    s * scale
}

fn integrate_memory_ode<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    v0: T,
    vd0: T,
) -> (Vec<T>, Vec<T>) {
    let n = grid.len();
    let dt = grid.dt();
    let w2 = sys.renormalized_frequency().powi(2);
    let scale = T::lit(2.0) / sys.mass() * dt;
    let (half, sixth) = (T::lit(0.5), T::one() / T::lit(6.0));
    let mut v = vec![T::zero(); n];
    let mut vd = vec![T::zero(); n];
    let mut mem = vec![T::zero(); n];
    v[0] = v0;
    vd[0] = vd0;
    let rhs = |x: T, xd: T, m: T| (xd, -w2 * x - m);
    for k in 0..n - 1 {
        // alpha_I(0) = 0 makes the memory at t_{k+1} depend on v_0..v_k only.
        mem[k + 1] = memory(alpha, &v, k + 1, scale);
        let (m0, m1) = (mem[k], mem[k + 1]);
        let mh = half * (m0 + m1);
        let (x, xd) = (v[k], vd[k]);
        let k1 = rhs(x, xd, m0);
        let k2 = rhs(x + half * dt * k1.0, xd + half * dt * k1.1, mh);
        let k3 = rhs(x + half * dt * k2.0, xd + half * dt * k2.1, mh);
        let k4 = rhs(x + dt * k3.0, xd + dt * k3.1, m1);
        v[k + 1] = x + dt * sixth * (k1.0 + T::lit(2.0) * (k2.0 + k3.0) + k4.0);
        vd[k + 1] = xd + dt * sixth * (k1.1 + T::lit(2.0) * (k2.1 + k3.1) + k4.1);
    }
    (v, vd)
}

/// Integrates both fundamental solutions with classical Runge–Kutta and a
/// trapezoid memory integral.
pub fn fundamental_solutions<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<FundamentalSolutions<T>> {
    alpha.grid().ensure_same(grid, "bath correlation vs fundamental-solution grid")?;
    let (v1, v1_dot) = integrate_memory_ode(alpha, sys, grid, T::one(), T::zero());
    let (v2, v2_dot) = integrate_memory_ode(alpha, sys, grid, T::zero(), T::one());
    Ok(FundamentalSolutions {
        grid: *grid,
        v1,
        v1_dot,
        v2,
        v2_dot,
    })
}

impl<T: Real> FundamentalSolutions<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    /// Largest residual of the memory equation at nodes `2..N-2`, with
    /// `v''` from the five-point stencil and the trapezoid memory.
    pub fn memory_residual(&self, alpha: &BathCorrelation<T>, sys: &SystemParams<T>) -> T {
        let dt = self.grid.dt();
        let w2 = sys.renormalized_frequency().powi(2);
        let scale = T::lit(2.0) / sys.mass() * dt;
        let n = self.grid.len();
        let mut worst = T::zero();
        for v in [&self.v1, &self.v2] {
            for k in 2..n.saturating_sub(2) {
                let d2 = (-v[k - 2] + T::lit(16.0) * (v[k - 1] + v[k + 1])
                    - T::lit(30.0) * v[k]
                    - v[k + 2])
                    / (T::lit(12.0) * dt * dt);
                let r = d2 + w2 * v[k] + memory(alpha, v, k, scale);
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    /// `v2(t) v1'(t) - v1(t) v2'(t)` at node `i`, the determinant of the
    /// two-point boundary problem scaled by `v2(t)`.
    pub fn boundary_determinant(&self, i: usize) -> T {
        self.v2[i] * self.v1_dot[i] - self.v1[i] * self.v2_dot[i]
    }

    fn determinant_is_degenerate(&self, i: usize) -> bool {
        let det = self.boundary_determinant(i);
        let scale = (self.v2[i] * self.v1_dot[i]).abs() + (self.v1[i] * self.v2_dot[i]).abs();
        !(det.abs() > T::lit(DEGENERACY_THRESHOLD) * scale) || !det.is_finite()
    }

    /// u-functions for final time `t_i`.
    pub fn u_functions(&self, i: usize) -> Result<UFunctions<T>> {
        if i == 0 || i >= self.grid.len() {
            return Err(crate::error::invalid(
                "t_index",
                format!("must lie in 1..={}, got {i}", self.grid.n_steps()),
            ));
        }
        let t = self.grid.time(i).to_f64_lossy();
        let v2_scale = self.v2[..=i].iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let w = self.v2[i];
        if !(w.abs() > T::lit(DEGENERACY_THRESHOLD) * v2_scale) {
            return Err(Error::Degenerate {
                t,
                reason: format!("v2(t) = {:e} vanishes; the boundary values do not fix u1, u2", w.to_f64_lossy()),
            });
        }
        let u1 = (0..=i)
            .map(|k| (w * self.v1[k] - self.v1[i] * self.v2[k]) / w)
            .collect();
        let u2 = (0..=i).map(|k| self.v2[k] / w).collect();
        Ok(UFunctions {
            t_index: i,
            u1,
            u2,
            u1_dot_end: self.boundary_determinant(i) / w,
            u2_dot_end: self.v2_dot[i] / w,
        })
    }
}

/// Solutions of the memory equation on `[0, t]` with `u1(0) = 1, u1(t) = 0`
/// and `u2(0) = 0, u2(t) = 1`, plus their derivatives at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct UFunctions<T> {
    pub t_index: usize,
    pub u1: Vec<T>,
    pub u2: Vec<T>,
    pub u1_dot_end: T,
    pub u2_dot_end: T,
}

/// Builds the u-functions for final time `t_index` by superposing the two
/// fundamental solutions.
pub fn solve_u_functions<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    t_index: usize,
) -> Result<UFunctions<T>> {
    fundamental_solutions(alpha, sys, grid)?.u_functions(t_index)
}

/// `G1(t1, t2) = g(t1 - t2)` from the integral equation
/// `g(s) = sin(w s)/w - (2/(M w)) int_0^s sin w(s - r) h(r) dr`,
/// `h(r) = int_0^r alpha_I(r - q) g(q) dq`, marched forward in `s`.
/// The derivative uses centered differences (second-order one-sided at the
/// ends).
#[derive(Debug, Clone, PartialEq)]
pub struct RetardedKernel<T> {
    pub g: Vec<T>,
    pub g_dot: Vec<T>,
}

pub fn retarded_kernel<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<RetardedKernel<T>> {
    alpha.grid().ensure_same(grid, "bath correlation vs Green's function grid")?;
    let n = grid.len();
    let dt = grid.dt();
    let w = sys.renormalized_frequency();
    let pref = T::lit(2.0) / (sys.mass() * w) * dt;
    let a = alpha.alpha_i();
    let sines: Vec<T> = grid.times().map(|t| (w * t).sin()).collect();
    let mut g = vec![T::zero(); n];
    let mut h = vec![T::zero(); n];
    for k in 1..n {
        let mut s = T::lit(0.5) * a[k] * g[0];
        for q in 1..k {
            s += a[k - q] * g[q];
        }
        h[k] = s * dt;
        let mut conv = T::zero();
        for r in 0..=k {
            conv += trapezoid_weight::<T>(r, 0, k) * sines[k - r] * h[r];
        }
        g[k] = sines[k] / w - pref * conv;
    }
    let g_dot = differentiate(&g, dt);
    Ok(RetardedKernel { g, g_dot })
}

fn differentiate<T: Real>(v: &[T], dt: T) -> Vec<T> {
    let n = v.len();
    let two_dt = T::lit(2.0) * dt;
    let mut d = vec![T::zero(); n];
    for k in 1..n - 1 {
        d[k] = (v[k + 1] - v[k - 1]) / two_dt;
    }
    let (three, four) = (T::lit(3.0), T::lit(4.0));
    d[0] = (-three * v[0] + four * v[1] - v[2]) / two_dt;
    d[n - 1] = (three * v[n - 1] - four * v[n - 2] + v[n - 3]) / two_dt;
    d
}

/// Green's functions for final time `t_i`.
///
/// `g1[k] = G1(t_k, 0)` and its derivative; `G1(t1, t2) = g1[k1 - k2]` for
/// `k1 >= k2` and zero otherwise. `g2` is the final-value Green's function
/// `G2(t', t1)`, row-major over `(t', t1)` on `[0, t]^2`: it solves the
/// memory equation in `t'` with a unit delta source at `t1` and vanishes
/// together with its `t'`-derivative at `t' = t`. With memory it is
/// nonzero on the whole square; without memory it reduces to
/// `sin w(t1 - t')/w` for `t' < t1` and zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenFunctions<T> {
    pub t_index: usize,
    pub g1: Vec<T>,
    pub g1_dot: Vec<T>,
    pub g2: Vec<T>,
    pub g2_dot: Vec<T>,
}

impl<T: Real> GreenFunctions<T> {
    pub fn g1(&self, k1: usize, k2: usize) -> T {
        if k1 >= k2 {
            self.g1[k1 - k2]
        } else {
            T::zero()
        }
    }

    pub fn g1_dot(&self, k1: usize, k2: usize) -> T {
        if k1 >= k2 {
            self.g1_dot[k1 - k2]
        } else {
            T::zero()
        }
    }

    pub fn g2(&self, k_obs: usize, k_src: usize) -> T {
        self.g2[k_obs * (self.t_index + 1) + k_src]
    }

    pub fn g2_dot(&self, k_obs: usize, k_src: usize) -> T {
        self.g2_dot[k_obs * (self.t_index + 1) + k_src]
    }
}

fn final_value_green<T: Real>(
    fs: &FundamentalSolutions<T>,
    rk: &RetardedKernel<T>,
    i: usize,
) -> (Vec<T>, Vec<T>) {
    let n = i + 1;
    let det = fs.v1[i] * fs.v2_dot[i] - fs.v2[i] * fs.v1_dot[i];
    let mut g2 = vec![T::zero(); n * n];
    let mut g2d = vec![T::zero(); n * n];
    for q in 0..n {
        // add a v1 + b v2 so that value and slope vanish at t' = t
        let r0 = -rk.g[i - q];
        let r1 = -rk.g_dot[i - q];
        let a = (r0 * fs.v2_dot[i] - fs.v2[i] * r1) / det;
        let b = (fs.v1[i] * r1 - fs.v1_dot[i] * r0) / det;
        for p in 0..n {
            let (mut val, mut der) = (
                a * fs.v1[p] + b * fs.v2[p],
                a * fs.v1_dot[p] + b * fs.v2_dot[p],
            );
            if p >= q {
                val += rk.g[p - q];
                der += rk.g_dot[p - q];
            }
            g2[p * n + q] = val;
            g2d[p * n + q] = der;
        }
    }
    (g2, g2d)
}

/// Green's functions for final time `t_index`.
pub fn solve_green_functions<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    t_index: usize,
) -> Result<GreenFunctions<T>> {
    if t_index == 0 || t_index >= grid.len() {
        return Err(crate::error::invalid(
            "t_index",
            format!("must lie in 1..={}, got {t_index}", grid.n_steps()),
        ));
    }
    let fs = fundamental_solutions(alpha, sys, grid)?;
    let rk = retarded_kernel(alpha, sys, grid)?;
    if fs.determinant_is_degenerate(t_index) {
        return Err(Error::Degenerate {
            t: grid.time(t_index).to_f64_lossy(),
            reason: "final-value problem for G2 is singular".into(),
        });
    }
    let (g2, g2_dot) = final_value_green(&fs, &rk, t_index);
    Ok(GreenFunctions {
        t_index,
        g1: rk.g[..=t_index].to_vec(),
        g1_dot: rk.g_dot[..=t_index].to_vec(),
        g2,
        g2_dot,
    })
}

/// Coefficients `B1..B4` at every grid node.
///
/// With `D = v2(t) v1'(t) - v1(t) v2'(t)` the integrands are
/// `x21 = u2 - (u2'(t)/u1'(t)) u1 = (v1'(t) v2(t') - v2'(t) v1(t')) / D`,
/// `x22 = u1 / (M u1'(t)) = (v2(t) v1(t') - v1(t) v2(t')) / (M D)`,
/// `x11 = (i/M) G1(t, t')`, `x12 = -i G1'(t, t')`,
/// `x23 = -(2i/M^2) int_0^t dt1 G2(t', t1) int_0^t dt2 alpha_R(t1 - t2) G1(t, t2)`,
/// `x24 = (2i/M) int_0^t dt1 G2(t', t1) int_0^t dt2 alpha_R(t1 - t2) G1'(t, t2)`.
/// The ratio forms are the u-function expressions with the removable zero
/// of `v2(t)` cancelled, so only `D = 0` (i.e. `u1'(t) = 0`) masks a node.
pub fn hpz_coefficients<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<CoefficientSet<T>> {
    let fs = fundamental_solutions(alpha, sys, grid)?;
    let rk = retarded_kernel(alpha, sys, grid)?;
    hpz_coefficients_from(&fs, &rk, alpha, sys, grid)
}

/// As [`hpz_coefficients`] with precomputed ingredients.
pub fn hpz_coefficients_from<T: Real>(
    fs: &FundamentalSolutions<T>,
    rk: &RetardedKernel<T>,
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
) -> Result<CoefficientSet<T>> {
    fs.grid().ensure_same(grid, "fundamental solutions vs coefficient grid")?;
    alpha.grid().ensure_same(grid, "bath correlation vs coefficient grid")?;
    let n = grid.len();
    if rk.g.len() != n {
        return Err(Error::GridMismatch("Green's function length".into()));
    }
    let m = sys.mass();
    let dt = grid.dt();
    let zero = Cplx::new(T::zero(), T::zero());

    let rows: Vec<Option<[Cplx<T>; 4]>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if i == 0 {
                return Some([zero; 4]);
            }
            if fs.determinant_is_degenerate(i) {
                return None;
            }
            let d = fs.boundary_determinant(i);
            let wt = |k: usize| trapezoid_weight::<T>(k, 0, i) * dt;
            let ai = |k: usize| alpha.imag_at(i as isize - k as isize);
            let ar = |k: usize| alpha.real_at(i as isize - k as isize);

            let mut b1 = T::zero();
            let mut b2 = T::zero();
            let mut b3r = T::zero();
            let mut b4r = T::zero();
            for k in 0..=i {
                let x21 = (fs.v1_dot[i] * fs.v2[k] - fs.v2_dot[i] * fs.v1[k]) / d;
                let x22 = (fs.v2[i] * fs.v1[k] - fs.v1[i] * fs.v2[k]) / (m * d);
                b1 += wt(k) * ai(k) * x21;
                b2 += wt(k) * ai(k) * x22;
                // alpha_R x11 and alpha_R x12 parts (imaginary)
                b3r += wt(k) * ar(k) * rk.g[i - k] / m;
                b4r -= wt(k) * ar(k) * rk.g_dot[i - k];
            }

            // S(t1) = int_0^t alpha_R(t1 - t2) G1(t, t2) dt2, and with G1'
            let mut s3 = vec![T::zero(); i + 1];
            let mut s4 = vec![T::zero(); i + 1];
            for (q, (a3, a4)) in s3.iter_mut().zip(s4.iter_mut()).enumerate() {
                for k in 0..=i {
                    let c = wt(k) * alpha.real_at(q as isize - k as isize);
                    *a3 += c * rk.g[i - k];
                    *a4 += c * rk.g_dot[i - k];
                }
            }
            let (g2, _) = final_value_green(fs, rk, i);
            let mut b3i = T::zero();
            let mut b4i = T::zero();
            for p in 0..=i {
                let c = wt(p) * ai(p);
                if c == T::zero() {
                    continue;
                }
                let row = &g2[p * (i + 1)..(p + 1) * (i + 1)];
                let mut x3 = T::zero();
                let mut x4 = T::zero();
                for q in 0..=i {
                    x3 += wt(q) * row[q] * s3[q];
                    x4 += wt(q) * row[q] * s4[q];
                }
                b3i += c * x3;
                b4i += c * x4;
            }
            let b3 = b3r - T::lit(2.0) / (m * m) * b3i;
            let b4 = b4r + T::lit(2.0) / m * b4i;
            Some([
                Cplx::new(b1, T::zero()),
                Cplx::new(b2, T::zero()),
                Cplx::new(T::zero(), b3),
                Cplx::new(T::zero(), b4),
            ])
        })
        .collect();

    let mut a: [Vec<Cplx<T>>; 4] = Default::default();
    let mut valid = Vec::with_capacity(n);
    for r in rows {
        valid.push(r.is_some());
        let r = r.unwrap_or([zero; 4]);
        for (col, v) in a.iter_mut().zip(r) {
            col.push(v);
        }
    }
    CoefficientSet::from_complex(*grid, a, vec![T::zero(); n], valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{correlation, SpectralDensity};
    use crate::volterra::solve_x11_x12;

    fn free(n: usize, t_max: f64) -> (BathCorrelation<f64>, SystemParams<f64>, TimeGrid<f64>) {
        let grid = TimeGrid::new(t_max, n).unwrap();
        let sys = SystemParams::from_renormalized(1.0, 1.0, 1.0, &SpectralDensity::zero()).unwrap();
        (BathCorrelation::zero(grid), sys, grid)
    }

    fn drude(n: usize) -> (BathCorrelation<f64>, SystemParams<f64>, TimeGrid<f64>) {
        let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
        let grid = TimeGrid::new(10.0, n).unwrap();
        let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
        (correlation(&sd, 1.0, &grid).unwrap(), sys, grid)
    }

    #[test]
    fn u_functions_without_memory() {
        let (alpha, sys, grid) = free(400, 2.0);
        let u = solve_u_functions(&alpha, &sys, &grid, 400).unwrap();
        let t = 2.0_f64;
        for (k, tp) in grid.times().enumerate() {
            assert!((u.u1[k] - (t - tp).sin() / t.sin()).abs() < 1e-9);
            assert!((u.u2[k] - tp.sin() / t.sin()).abs() < 1e-9);
        }
        assert_eq!(u.u1[0], 1.0);
        assert_eq!(u.u1[400], 0.0);
        assert_eq!(u.u2[0], 0.0);
        assert_eq!(u.u2[400], 1.0);
    }

    #[test]
    fn half_period_is_degenerate() {
        let (alpha, sys, grid) = free(200, std::f64::consts::PI);
        let r = solve_u_functions(&alpha, &sys, &grid, 200);
        assert!(matches!(r, Err(Error::Degenerate { .. })), "{r:?}");
        assert!(solve_u_functions(&alpha, &sys, &grid, 100).is_ok());
    }

    #[test]
    fn green_functions_without_memory() {
        let (alpha, sys, grid) = free(400, 3.0);
        let g = solve_green_functions(&alpha, &sys, &grid, 400).unwrap();
        for k1 in (0..=400).step_by(7) {
            for k2 in (0..=400).step_by(11) {
                let tau = grid.time(k1) - grid.time(k2);
                let g1 = if k1 >= k2 { tau.sin() } else { 0.0 };
                assert!((g.g1(k1, k2) - g1).abs() < 1e-14);
                let g2 = if k1 < k2 { -tau.sin() } else { 0.0 };
                // limited by the differenced derivative of G1
                assert!((g.g2(k1, k2) - g2).abs() < grid.dt().powi(2), "{k1} {k2}");
            }
        }
        assert!((g.g1_dot(0, 0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn green_functions_with_memory() {
        let (alpha, sys, grid) = drude(400);
        let g = solve_green_functions(&alpha, &sys, &grid, 400).unwrap();
        for k in 0..=400 {
            assert_eq!(g.g1(k, k), 0.0);
            assert_eq!(g.g1(k, k + 1), 0.0);
            assert!(g.g2(400, k).abs() < 1e-12);
            assert!(g.g2_dot(400, k).abs() < 1e-12);
        }
        let (x11, _) = solve_x11_x12(&alpha, &sys, &grid).unwrap();
        let m = sys.mass();
        for i in (1..=400).step_by(13) {
            for j in 0..=i {
                let z = x11.get(i, j);
                let dev = (-(z * m) * Cplx::new(0.0, 1.0)).re - g.g1(i, j);
                assert!(dev.abs() <= 1e-4, "{i} {j} {dev}");
            }
        }
    }

    #[test]
    fn memory_residual_is_second_order_small() {
        let sd = SpectralDensity::exponential(0.2, 5.0).unwrap();
        let mut prev = f64::INFINITY;
        for n in [100, 200] {
            let grid = TimeGrid::new(10.0, n).unwrap();
            let alpha = correlation(&sd, 1.0, &grid).unwrap();
            let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
            let r = fundamental_solutions(&alpha, &sys, &grid)
                .unwrap()
                .memory_residual(&alpha, &sys);
            assert!(r < prev / 3.0, "{r} vs {prev}");
            prev = r;
        }
    }

    #[test]
    fn zero_coupling_coefficients_vanish() {
        let (alpha, sys, grid) = free(50, 2.0);
        let b = hpz_coefficients(&alpha, &sys, &grid).unwrap();
        for j in 1..=4 {
            assert!(b.series(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coefficients_are_real_and_unmasked() {
        let (alpha, sys, grid) = drude(100);
        let b = hpz_coefficients(&alpha, &sys, &grid).unwrap();
        assert_eq!(b.n_invalid(), 0);
        assert!(b.reality_defect().iter().all(|&d| d <= 1e-12));
    }
}
