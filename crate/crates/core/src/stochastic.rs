//! Monte Carlo unraveling of the reduced dynamics.
//!
//! Each trajectory integrates, in the truncated number basis,
//!
//! ```text
//! i d rho = [H + g(t) x, rho] dt + 1/2 [x, rho] dW1 + i/2 {x, rho} dW2*
//! ```
//!
//! with `dW1 = (mu1 + i mu4) dt`, `dW2* = (mu2 - i mu3) dt` and the
//! bath-induced field `g` built from the same white noises. The ensemble
//! mean of `rho` converges to the reduced density matrix. Individual
//! trajectories are neither hermitian nor normalized.
//!
//! The integrator is Euler–Maruyama in the interaction picture of
//! `H0 = w (n + 1/2)`, so the free rotation is exact and only the
//! coupling terms carry the `O(dt^{1/2})` strong error.
//!
//! Writing the coupling as `(lambda x)(B / lambda)` leaves the model
//! unchanged but moves weight between the noise terms (scaled by `lambda`)
//! and the field term (scaled by `1/lambda`). The per-trajectory trace
//! behaves like `exp(lambda^2 W^2 / (4 M w))` for a Wiener increment `W`,
//! so its variance diverges after a time of order `M w / lambda^2`; a
//! `lambda` below one extends the usable window at weak coupling. With a
//! vanishing bath correlation the field term is absent and the ensemble
//! runner takes `lambda = 0`, so every path is unitary.

use std::io::Write;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bath::{BathCorrelation, SystemParams};
use crate::error::{invalid, Error, Result};
use crate::grid::{trapezoid_weight, TimeGrid};
use crate::io::fmt_num;
use crate::master::fock::{to_schrodinger, DensityMatrix, Generator};
use crate::scalar::{cplx, Cplx, Real};

/// Frobenius norm above which a trajectory is rejected.
pub const BLOWUP_NORM: f64 = 1e12;

/// Four independent discrete white noises on a grid, each sample with
/// variance `1/dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath<T> {
    grid: TimeGrid<T>,
    mu: [Vec<T>; 4],
    seed: u64,
}

impl<T: Real> NoisePath<T> {
    /// Builds a path from explicit channel samples.
    pub fn from_channels(grid: TimeGrid<T>, mu: [Vec<T>; 4], seed: u64) -> Result<Self> {
        if mu.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch(format!(
                "noise channels need {} samples",
                grid.len()
            )));
        }
        Ok(Self { grid, mu, seed })
    }

    /// All channels identically zero.
    pub fn zero(grid: TimeGrid<T>) -> Self {
        let z = vec![T::zero(); grid.len()];
        Self {
            grid,
            mu: [z.clone(), z.clone(), z.clone(), z],
            seed: 0,
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Channel `k` in `1..=4`.
    pub fn channel(&self, k: usize) -> &[T] {
        assert!((1..=4).contains(&k), "noise channels are numbered 1 to 4");
        &self.mu[k - 1]
    }
}

/// Draws a noise path. Samples are generated node by node, channels 1 to 4
/// within a node, from a ChaCha8 stream seeded with `seed`.
pub fn sample_noise<T: Real>(grid: &TimeGrid<T>, seed: u64) -> NoisePath<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = T::one() / grid.dt().sqrt();
    let n = grid.len();
    let mut mu: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for _ in 0..n {
        for c in mu.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            c.push(T::lit(z) * scale);
        }
    }
    NoisePath {
        grid: *grid,
        mu,
        seed,
    }
}

/// Bath-induced field
/// `g(t_n) = dt sum_{m<=n} w_m [a_R(t_n-t_m)(mu1 - i mu4)_m + a_I(t_n-t_m)(mu2 + i mu3)_m]`
/// with trapezoid weights on `[0, t_n]`.
pub fn bath_field<T: Real>(path: &NoisePath<T>, alpha: &BathCorrelation<T>) -> Result<Vec<Cplx<T>>> {
    path.grid.ensure_same(alpha.grid(), "noise vs bath correlation")?;
    let n = path.grid.len();
    let dt = path.grid.dt();
    let (ar, ai) = (alpha.alpha_r(), alpha.alpha_i());
    let [m1, m2, m3, m4] = &path.mu;
    let a: Vec<Cplx<T>> = (0..n).map(|m| cplx(m1[m], -m4[m])).collect();
    let b: Vec<Cplx<T>> = (0..n).map(|m| cplx(m2[m], m3[m])).collect();
    let mut g = vec![cplx(T::zero(), T::zero()); n];
    if alpha.is_zero() {
        return Ok(g);
    }
    for (i, gi) in g.iter_mut().enumerate().skip(1) {
        let mut s = cplx(T::zero(), T::zero());
        for m in 0..=i {
            let w: T = trapezoid_weight(m, 0, i);
            s += (a[m] * ar[i - m] + b[m] * ai[i - m]) * w;
        }
        *gi = s * dt;
    }
    Ok(g)
}

/// One stochastic trajectory sampled on the grid (Schrödinger picture).
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub seed: u64,
    pub states: Vec<DensityMatrix<T>>,
}

/// Unnormalized expectations `(tr rho, tr x rho, tr p rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawObservables<T> {
    pub trace: Cplx<T>,
    pub x: Cplx<T>,
    pub p: Cplx<T>,
}

/// Observables of an interaction-picture matrix at time `t`.
fn observables<T: Real>(rho_i: &[Cplx<T>], d: usize, mass: T, omega: T, t: T) -> RawObservables<T> {
    // rho_S(m+1, m) = e^{-i w t} rho_I(m+1, m)
    let (s, c) = (omega * t).sin_cos();
    let ph = cplx(c, -s);
    let mut tr = cplx(T::zero(), T::zero());
    let mut a = tr;
    let mut ad = tr;
    for m in 0..d {
        tr += rho_i[m * d + m];
        if m + 1 < d {
            let r = T::from_count(m + 1).sqrt();
            a += rho_i[(m + 1) * d + m] * ph * r;
            ad += rho_i[m * d + m + 1] * ph.conj() * r;
        }
    }
    let mw = mass * omega;
    let two = T::lit(2.0);
    let i = cplx(T::zero(), T::one());
    RawObservables {
        trace: tr,
        x: (a + ad) / (two * mw).sqrt(),
        p: i * (ad - a) * (mw / two).sqrt(),
    }
}

/// Core Euler–Maruyama loop. Calls `visit(node, rho_I)` at every node.
fn integrate<T: Real, F: FnMut(usize, &[Cplx<T>])>(
    path: &NoisePath<T>,
    gbar: &[Cplx<T>],
    sys: &SystemParams<T>,
    rho0: &DensityMatrix<T>,
    lambda: T,
    mut visit: F,
) -> Result<()> {
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(invalid("noise_scale", format!("must be non-negative, got {lambda}")));
    }
    let silent = gbar.iter().all(|g| g.re == T::zero() && g.im == T::zero());
    if lambda == T::zero() && !silent {
        return Err(invalid("noise_scale", "zero only allowed without a bath field"));
    }
    let grid = path.grid;
    if gbar.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "bath field has {} samples, grid has {} nodes",
            gbar.len(),
            grid.len()
        )));
    }
    let d = rho0.dim();
    if d < 2 {
        return Err(invalid("n_fock", "need at least two levels"));
    }
    let gen = Generator::new(d, sys.mass(), sys.renormalized_frequency());
    let (f1, f2) = (sys.drive_f1(), sys.drive_f2());
    let dt = grid.dt();
    let half = T::lit(0.5);
    let i = cplx(T::zero(), T::one());
    let limit = T::lit(BLOWUP_NORM).powi(2);
    let mut rho = rho0.data().to_vec();
    let zero = vec![cplx(T::zero(), T::zero()); d * d];
    let (mut xr, mut rx, mut pr, mut rp) = (zero.clone(), zero.clone(), zero.clone(), zero);
    visit(0, &rho);
    for n in 0..grid.n_steps() {
        let t = grid.time(n);
        let (x, p) = gen.operators(t);
        x.left(&rho, &mut xr, d);
        x.right(&rho, &mut rx, d);
        let fx = if silent {
            cplx(f1.value(t), T::zero())
        } else {
            cplx(f1.value(t), T::zero()) + gbar[n] / lambda
        };
        let fp = f2.value(t);
        if fp != T::zero() {
            p.left(&rho, &mut pr, d);
            p.right(&rho, &mut rp, d);
        }
        let [m1, m2, m3, m4] = &path.mu;
        let dw1 = cplx(m1[n], m4[n]) * (dt * lambda);
        let dw2c = cplx(m2[n], -m3[n]) * (dt * lambda);
        // d rho = -i (fx [x,rho] + fp [p,rho]) dt - i/2 [x,rho] dW1 + 1/2 {x,rho} dW2*
        let c_comm = -i * (fx * dt + dw1 * half);
        let c_anti = dw2c * half;
        let c_p = -i * fp * dt;
        let mut norm2 = T::zero();
        for k in 0..d * d {
            let mut v = rho[k] + (xr[k] - rx[k]) * c_comm + (xr[k] + rx[k]) * c_anti;
            if fp != T::zero() {
                v += (pr[k] - rp[k]) * c_p;
            }
            norm2 += v.norm_sqr();
            rho[k] = v;
        }
        if !norm2.is_finite() || norm2 > limit {
            return Err(Error::TrajectoryRejected {
                seed: path.seed,
                step: n + 1,
            });
        }
        visit(n + 1, &rho);
    }
    Ok(())
}

/// Integrates one trajectory and stores every node.
pub fn evolve_trajectory<T: Real>(
    path: &NoisePath<T>,
    gbar: &[Cplx<T>],
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    rho0: &DensityMatrix<T>,
) -> Result<Trajectory<T>> {
    evolve_trajectory_scaled(path, gbar, sys, grid, rho0, T::one())
}

/// As [`evolve_trajectory`] with coupling split `lambda`; `gbar` is the
/// unscaled field from [`bath_field`].
pub fn evolve_trajectory_scaled<T: Real>(
    path: &NoisePath<T>,
    gbar: &[Cplx<T>],
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    rho0: &DensityMatrix<T>,
    lambda: T,
) -> Result<Trajectory<T>> {
    path.grid.ensure_same(grid, "noise vs propagation grid")?;
    let d = rho0.dim();
    let w = sys.renormalized_frequency();
    let mut states = Vec::with_capacity(grid.len());
    integrate(path, gbar, sys, rho0, lambda, |n, rho| {
        states.push(to_schrodinger(rho, d, w, grid.time(n)))
    })?;
    Ok(Trajectory {
        seed: path.seed,
        states,
    })
}

/// Ensemble mean of stored trajectories.
#[derive(Debug, Clone)]
pub struct EnsembleAverage<T> {
    /// Hermitized mean `(rho + rho^dagger)/2` at each node.
    pub states: Vec<DensityMatrix<T>>,
    /// Frobenius norm of the anti-hermitian part of the raw mean.
    pub anti_hermitian_norm: Vec<T>,
    /// Largest entrywise standard error of the mean at each node.
    pub std_error: Vec<T>,
}

/// Arithmetic mean over trajectories with per-node standard errors.
pub fn average<T: Real>(trajectories: &[Trajectory<T>]) -> Result<EnsembleAverage<T>> {
    let n = trajectories.len();
    if n < 2 {
        return Err(Error::Arity { needed: 2, got: n });
    }
    let nodes = trajectories[0].states.len();
    let d = trajectories[0].states.first().map_or(0, |s| s.dim());
    if trajectories
        .iter()
        .any(|t| t.states.len() != nodes || t.states.iter().any(|s| s.dim() != d))
    {
        return Err(Error::GridMismatch("trajectories differ in length or dimension".into()));
    }
    let nt = T::from_count(n);
    let half = T::lit(0.5);
    let mut states = Vec::with_capacity(nodes);
    let mut anti = Vec::with_capacity(nodes);
    let mut se = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let mut mean = vec![cplx(T::zero(), T::zero()); d * d];
        for tr in trajectories {
            for (m, z) in mean.iter_mut().zip(tr.states[k].data()) {
                *m += *z;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        let mut worst = T::zero();
        for (e, m) in mean.iter().enumerate() {
            let ss: T = trajectories
                .iter()
                .map(|tr| (tr.states[k].data()[e] - m).norm_sqr())
                .sum();
            worst = worst.max((ss / (nt - T::one()) / nt).sqrt());
        }
        let mut h = DensityMatrix::zeros(d);
        let mut a2 = T::zero();
        for r in 0..d {
            for c in 0..d {
                let (u, v) = (mean[r * d + c], mean[c * d + r].conj());
                h[(r, c)] = (u + v) * half;
                a2 += ((u - v) * half).norm_sqr();
            }
        }
        states.push(h);
        anti.push(a2.sqrt());
        se.push(worst);
    }
    Ok(EnsembleAverage {
        states,
        anti_hermitian_norm: anti,
        std_error: se,
    })
}

/// Ensemble run settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    /// Trajectory `k` uses seed `base_seed + k` (wrapping).
    pub base_seed: u64,
    /// Coupling split `lambda`; one is the unscaled equation. Taken as
    /// zero when the bath correlation vanishes.
    pub noise_scale: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            base_seed: 0,
            noise_scale: 1.0,
        }
    }
}

impl EnsembleConfig {
    pub fn seed(&self, k: usize) -> u64 {
        self.base_seed.wrapping_add(k as u64)
    }
}

/// Ensemble moments at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleRow<T> {
    pub mean_x: T,
    pub se_x: T,
    pub mean_p: T,
    pub se_p: T,
    pub trace_re: T,
    pub se_trace: T,
    /// Sample variance of the per-trajectory trace.
    pub trace_var: T,
}

/// Streaming ensemble statistics of `Re tr(x rho)`, `Re tr(p rho)` and
/// `Re tr(rho)`.
#[derive(Debug, Clone)]
pub struct EnsembleStats<T> {
    pub grid: TimeGrid<T>,
    pub config: EnsembleConfig,
    pub rows: Vec<EnsembleRow<T>>,
    pub n_accepted: usize,
    pub rejected_seeds: Vec<u64>,
}

impl<T: Real> EnsembleStats<T> {
    pub fn rejection_rate(&self) -> f64 {
        self.rejected_seeds.len() as f64 / self.config.n_traj.max(1) as f64
    }

    /// CSV with columns `t, mean_x, se_x, mean_p, se_p, trace_re, se_trace`,
    /// preceded by `#` header lines recording the seeds.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# seeds: {}..{} ({} trajectories, base_seed = {}, noise_scale = {})",
            self.config.base_seed,
            self.config.seed(self.config.n_traj.saturating_sub(1)),
            self.config.n_traj,
            self.config.base_seed,
            self.config.noise_scale
        )?;
        if !self.rejected_seeds.is_empty() {
            let list: Vec<String> = self.rejected_seeds.iter().map(|s| s.to_string()).collect();
            writeln!(w, "# rejected seeds: {}", list.join(" "))?;
        }
        writeln!(w, "t,mean_x,se_x,mean_p,se_p,trace_re,se_trace")?;
        for (k, r) in self.rows.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt_num(self.grid.time(k)),
                fmt_num(r.mean_x),
                fmt_num(r.se_x),
                fmt_num(r.mean_p),
                fmt_num(r.se_p),
                fmt_num(r.trace_re),
                fmt_num(r.se_trace)
            )?;
        }
        Ok(())
    }
}

/// Per-node running sums of `(x, x^2)` for three observables.
#[derive(Debug, Clone)]
struct Sums<T> {
    count: usize,
    s: Vec<[T; 6]>,
    rejected: Vec<(u64, usize)>,
}

impl<T: Real> Sums<T> {
    fn new(nodes: usize) -> Self {
        Self {
            count: 0,
            s: vec![[T::zero(); 6]; nodes],
            rejected: Vec::new(),
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        for (a, b) in self.s.iter_mut().zip(&other.s) {
            for q in 0..6 {
                a[q] += b[q];
            }
        }
        self.rejected.extend(other.rejected);
        self
    }
}

const BLOCK: usize = 64;

/// Runs `cfg.n_traj` trajectories in parallel and reduces them into
/// ensemble moments. Trajectories are grouped into fixed blocks of
/// consecutive seeds, each block summed in seed order, and the block sums
/// combined by a fixed pairwise tree, so the result does not depend on the
/// number of threads. Diverging trajectories are logged and excluded; if
/// fewer than two survive, the first rejection is returned.
pub fn run_ensemble<T: Real>(
    alpha: &BathCorrelation<T>,
    sys: &SystemParams<T>,
    grid: &TimeGrid<T>,
    rho0: &DensityMatrix<T>,
    cfg: EnsembleConfig,
) -> Result<EnsembleStats<T>> {
    if cfg.n_traj < 2 {
        return Err(Error::Arity {
            needed: 2,
            got: cfg.n_traj,
        });
    }
    alpha.grid().ensure_same(grid, "bath correlation vs propagation grid")?;
    let nodes = grid.len();
    let d = rho0.dim();
    let (mass, w) = (sys.mass(), sys.renormalized_frequency());
    let lambda = if alpha.is_zero() {
        T::zero()
    } else {
        T::lit(cfg.noise_scale)
    };
    let n_blocks = cfg.n_traj.div_ceil(BLOCK);
    let blocks: Vec<Result<Sums<T>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = Sums::new(nodes);
            let mut buf = vec![[T::zero(); 3]; nodes];
            for k in b * BLOCK..((b + 1) * BLOCK).min(cfg.n_traj) {
                let seed = cfg.seed(k);
                let path = sample_noise(grid, seed);
                let g = bath_field(&path, alpha)?;
                let run = integrate(&path, &g, sys, rho0, lambda, |n, rho| {
                    let o = observables(rho, d, mass, w, grid.time(n));
                    buf[n] = [o.x.re, o.p.re, o.trace.re];
                });
                match run {
                    Ok(()) => {
                        acc.count += 1;
                        for (s, v) in acc.s.iter_mut().zip(&buf) {
                            for q in 0..3 {
                                s[2 * q] += v[q];
                                s[2 * q + 1] += v[q] * v[q];
                            }
                        }
                    }
                    Err(Error::TrajectoryRejected { seed, step }) => {
                        warn!("trajectory with seed {seed} rejected at step {step}");
                        acc.rejected.push((seed, step));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(acc)
        })
        .collect();
    let mut level = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        level = next;
    }
    let total = level.pop().expect("at least one block");
    if total.count < 2 {
        if let Some(&(seed, step)) = total.rejected.first() {
            return Err(Error::TrajectoryRejected { seed, step });
        }
        return Err(Error::Arity {
            needed: 2,
            got: total.count,
        });
    }
    let n = T::from_count(total.count);
    let rows = total
        .s
        .iter()
        .map(|s| {
            let stat = |q: usize| {
                let mean = s[2 * q] / n;
                let var = ((s[2 * q + 1] - n * mean * mean) / (n - T::one())).max(T::zero());
                (mean, var)
            };
            let (mx, vx) = stat(0);
            let (mp, vp) = stat(1);
            let (mt, vt) = stat(2);
            EnsembleRow {
                mean_x: mx,
                se_x: (vx / n).sqrt(),
                mean_p: mp,
                se_p: (vp / n).sqrt(),
                trace_re: mt,
                se_trace: (vt / n).sqrt(),
                trace_var: vt,
            }
        })
        .collect();
    Ok(EnsembleStats {
        grid: *grid,
        config: cfg,
        rows,
        n_accepted: total.count,
        rejected_seeds: total.rejected.into_iter().map(|(seed, _)| seed).collect(),
    })
}
