//! Spectral densities, the bath correlation function and the counter-term
//! frequency renormalization.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::io::fmt_num;
use crate::quadrature::{composite_gauss_legendre, integrate_adaptive, integrate_half_line};
use crate::scalar::Real;

/// Functional form of a spectral density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralKind {
    /// `eta * w * exp(-w / omega_c)`
    OhmicExponential,
    /// `eta * w * omega_c^2 / (w^2 + omega_c^2)`
    OhmicDrude,
    /// Linear interpolation of `(w, J)` samples, zero outside the table.
    Tabulated,
}

/// Bath spectral density `J(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDensity<T> {
    kind: SpectralKind,
    eta: T,
    omega_c: T,
    table: Option<Vec<(T, T)>>,
}

impl<T: Real> SpectralDensity<T> {
    /// Ohmic density with a Drude (Lorentzian) cutoff. `omega_c = inf`
    /// describes the unregularized Ohmic bath.
    pub fn drude(eta: T, omega_c: T) -> Result<Self> {
        Self::ohmic(SpectralKind::OhmicDrude, eta, omega_c)
    }

    pub fn exponential(eta: T, omega_c: T) -> Result<Self> {
        Self::ohmic(SpectralKind::OhmicExponential, eta, omega_c)
    }

    fn ohmic(kind: SpectralKind, eta: T, omega_c: T) -> Result<Self> {
        if !(eta >= T::zero()) || !eta.is_finite() {
            return Err(invalid("eta", format!("must be finite and non-negative, got {eta}")));
        }
        if !(omega_c > T::zero()) {
            return Err(invalid("omega_c", format!("must be positive, got {omega_c}")));
        }
        Ok(Self {
            kind,
            eta,
            omega_c,
            table: None,
        })
    }

    /// Tabulated density from samples sorted by strictly increasing frequency.
    pub fn tabulated(samples: Vec<(T, T)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid("table", "need at least two samples"));
        }
        if samples[0].0 < T::zero() {
            return Err(invalid("table", "frequencies must be non-negative"));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(invalid("table", "frequencies must be strictly increasing"));
            }
        }
        if samples.iter().any(|&(w, j)| !w.is_finite() || !j.is_finite() || j < T::zero()) {
            return Err(invalid("table", "entries must be finite with J >= 0"));
        }
        let hi = samples[samples.len() - 1].0;
        Ok(Self {
            kind: SpectralKind::Tabulated,
            eta: T::one(),
            omega_c: hi,
            table: Some(samples),
        })
    }

    /// `J = 0`: no coupling.
    pub fn zero() -> Self {
        Self {
            kind: SpectralKind::OhmicDrude,
            eta: T::zero(),
            omega_c: T::one(),
            table: None,
        }
    }

    pub fn kind(&self) -> SpectralKind {
        self.kind
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn omega_c(&self) -> T {
        self.omega_c
    }

    pub fn table(&self) -> Option<&[(T, T)]> {
        self.table.as_deref()
    }

    pub fn is_zero(&self) -> bool {
        match &self.table {
            Some(t) => t.iter().all(|&(_, j)| j == T::zero()),
            None => self.eta == T::zero(),
        }
    }

    /// `J(w)` for `w >= 0`.
    pub fn evaluate(&self, omega: T) -> Result<T> {
        if !(omega >= T::zero()) {
            return Err(Error::Domain {
                omega: omega.to_f64_lossy(),
                reason: "frequency must be non-negative".into(),
            });
        }
        if let Some(t) = &self.table {
            let (lo, hi) = (t[0].0, t[t.len() - 1].0);
            if omega < lo || omega > hi {
                return Err(Error::Extrapolation {
                    omega: omega.to_f64_lossy(),
                    lo: lo.to_f64_lossy(),
                    hi: hi.to_f64_lossy(),
                });
            }
        }
        Ok(self.value(omega))
    }

    /// `J(w)` without domain checks; zero outside a table.
    fn value(&self, omega: T) -> T {
        match self.kind {
            SpectralKind::OhmicDrude => {
                if self.omega_c.is_infinite() {
                    self.eta * omega
                } else {
                    let wc2 = self.omega_c * self.omega_c;
                    self.eta * omega * wc2 / (omega * omega + wc2)
                }
            }
            SpectralKind::OhmicExponential => self.eta * omega * (-omega / self.omega_c).exp(),
            SpectralKind::Tabulated => interpolate(self.table.as_deref().unwrap_or(&[]), omega),
        }
    }

    /// `J(w) / w`, continued to `w = 0` for the Ohmic kinds.
    fn value_over_omega(&self, omega: T) -> T {
        match self.kind {
            SpectralKind::OhmicDrude | SpectralKind::OhmicExponential if omega == T::zero() => {
                self.eta
            }
            _ => self.value(omega) / omega,
        }
    }

    fn ensure_regularized(&self) -> Result<()> {
        if self.table.is_none() && self.omega_c.is_infinite() && !self.is_zero() {
            return Err(Error::Divergent(
                "Ohmic density without a finite cutoff".into(),
            ));
        }
        Ok(())
    }

    /// Upper limit of the frequency integrals, `max(50 omega_c, 50 / beta)`
    /// for the Ohmic kinds and the table end for tabulated densities.
    pub fn frequency_cutoff(&self, beta: T) -> T {
        match &self.table {
            Some(t) => t[t.len() - 1].0,
            None => {
                let fifty = T::lit(50.0);
                let thermal = if beta.is_infinite() { T::zero() } else { fifty / beta };
                (fifty * self.omega_c).max(thermal)
            }
        }
    }
}

fn interpolate<T: Real>(table: &[(T, T)], omega: T) -> T {
    if table.is_empty() || omega < table[0].0 || omega > table[table.len() - 1].0 {
        return T::zero();
    }
    let k = table.partition_point(|&(w, _)| w <= omega);
    if k == 0 {
        return table[0].1;
    }
    if k >= table.len() {
        return table[table.len() - 1].1;
    }
    let (w0, j0) = table[k - 1];
    let (w1, j1) = table[k];
    j0 + (j1 - j0) * (omega - w0) / (w1 - w0)
}

/// Counter-term `(2 / (M pi)) * int_0^inf J(w) / w dw`, relative accuracy
/// 1e-8 or better.
pub fn counter_term<T: Real>(sd: &SpectralDensity<T>, mass: T) -> Result<T> {
    if !(mass > T::zero()) {
        return Err(invalid("mass", format!("must be positive, got {mass}")));
    }
    if sd.is_zero() {
        return Ok(T::zero());
    }
    sd.ensure_regularized()?;
    let rel = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    let integral = match &sd.table {
        None => integrate_half_line(|w| sd.value_over_omega(w), sd.omega_c, rel, T::zero())?,
        Some(t) => {
            if t[0].0 == T::zero() && t[0].1 > T::zero() {
                return Err(Error::Divergent("J(0) > 0 makes J(w)/w non-integrable".into()));
            }
            let mut acc = T::zero();
            for seg in t.windows(2) {
                acc += integrate_adaptive(
                    |w| sd.value_over_omega(w),
                    seg[0].0,
                    seg[1].0,
                    rel,
                    T::min_positive_value(),
                )?;
            }
            acc
        }
    };
    Ok(T::lit(2.0) * integral / (mass * T::PI()))
}

/// Real and imaginary parts of the bath correlation function on a grid.
///
/// Negative arguments are served by the even/odd extensions
/// [`BathCorrelation::real_at`] and [`BathCorrelation::imag_at`].
#[derive(Debug, Clone, PartialEq)]
pub struct BathCorrelation<T> {
    grid: TimeGrid<T>,
    alpha_r: Vec<T>,
    alpha_i: Vec<T>,
}

impl<T: Real> BathCorrelation<T> {
    pub fn new(grid: TimeGrid<T>, alpha_r: Vec<T>, alpha_i: Vec<T>) -> Result<Self> {
        if alpha_r.len() != grid.len() || alpha_i.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "correlation arrays of length {}/{} on a grid with {} nodes",
                alpha_r.len(),
                alpha_i.len(),
                grid.len()
            )));
        }
        if alpha_i[0] != T::zero() {
            return Err(invalid("alpha_i", "must vanish at t = 0"));
        }
        Ok(Self {
            grid,
            alpha_r,
            alpha_i,
        })
    }

    pub fn zero(grid: TimeGrid<T>) -> Self {
        Self {
            grid,
            alpha_r: vec![T::zero(); grid.len()],
            alpha_i: vec![T::zero(); grid.len()],
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn alpha_r(&self) -> &[T] {
        &self.alpha_r
    }

    pub fn alpha_i(&self) -> &[T] {
        &self.alpha_i
    }

    /// `alpha_R(k dt)` for any signed node offset.
    #[inline]
    pub fn real_at(&self, k: isize) -> T {
        self.alpha_r[k.unsigned_abs()]
    }

    /// `alpha_I(k dt)` for any signed node offset.
    #[inline]
    pub fn imag_at(&self, k: isize) -> T {
        if k >= 0 {
            self.alpha_i[k as usize]
        } else {
            -self.alpha_i[k.unsigned_abs()]
        }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha_r.iter().chain(&self.alpha_i).all(|&v| v == T::zero())
    }

    pub fn has_memory(&self) -> bool {
        self.alpha_i.iter().any(|&v| v != T::zero())
    }

    /// Copy with the sign of `alpha_I` flipped. Used to check that the
    /// equivalence test notices a corrupted kernel.
    pub fn negated_imag(&self) -> Self {
        Self {
            grid: self.grid,
            alpha_r: self.alpha_r.clone(),
            alpha_i: self.alpha_i.iter().map(|&v| -v).collect(),
        }
    }

    /// CSV with columns `t, alpha_r, alpha_i`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,alpha_r,alpha_i")?;
        for (k, t) in self.grid.times().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                fmt_num(t),
                fmt_num(self.alpha_r[k]),
                fmt_num(self.alpha_i[k])
            )?;
        }
        Ok(())
    }
}

/// Bath correlation function
/// `alpha_R(t) = (1/pi) int J(w) coth(beta w / 2) cos(w t) dw` and
/// `alpha_I(t) = -(1/pi) int J(w) sin(w t) dw` on every grid node.
///
/// The integrals run over `[0, frequency_cutoff(beta)]` with 16-point
/// Gauss–Legendre panels narrow enough to resolve `cos(w t_max)` and the
/// thermal factor. `beta = inf` means zero temperature.
pub fn correlation<T: Real>(
    sd: &SpectralDensity<T>,
    beta: T,
    grid: &TimeGrid<T>,
) -> Result<BathCorrelation<T>> {
    if !(beta > T::zero()) {
        return Err(invalid("beta", format!("must be positive or infinite, got {beta}")));
    }
    if sd.is_zero() {
        return Ok(BathCorrelation::zero(*grid));
    }
    sd.ensure_regularized()?;
    if let Some(t) = &sd.table {
        if beta.is_finite() && t[0].0 == T::zero() && t[0].1 > T::zero() {
            return Err(Error::Divergent(
                "J(0) > 0 with finite temperature makes coth(beta w/2) J(w) non-integrable"
                    .into(),
            ));
        }
    }
    let (nodes, weights) = frequency_nodes(sd, beta, grid.t_max());
    let two = T::lit(2.0);
    let noise: Vec<(T, T)> = nodes
        .iter()
        .zip(&weights)
        .map(|(&w, &q)| {
            let j = sd.value(w);
            let thermal = if beta.is_infinite() {
                T::one()
            } else {
                T::one() / (beta * w / two).tanh()
            };
            let jt = if j == T::zero() { T::zero() } else { j * thermal };
            (w, q * jt)
        })
        .collect();
    let friction: Vec<T> = nodes.iter().zip(&weights).map(|(&w, &q)| q * sd.value(w)).collect();
    let inv_pi = T::FRAC_1_PI();
    let values: Vec<(T, T)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            if k == 0 {
                let r: T = noise.iter().map(|&(_, c)| c).sum();
                return (r * inv_pi, T::zero());
            }
            let t = grid.time(k);
            let mut re = T::zero();
            let mut im = T::zero();
            for ((w, c), f) in noise.iter().zip(&friction) {
                let (s, cs) = (*w * t).sin_cos();
                re += *c * cs;
                im += *f * s;
            }
            (re * inv_pi, -im * inv_pi)
        })
        .collect();
    let (alpha_r, alpha_i) = values.into_iter().unzip();
    BathCorrelation::new(*grid, alpha_r, alpha_i)
}

/// Gauss–Legendre nodes covering `[0, cutoff]`. Panels are at most
/// `min(2 / t_max, omega_c / 8)` wide, and at most `2 / beta` wide on the
/// thermal region `[0, 40 / beta]`. Table knots are panel boundaries.
fn frequency_nodes<T: Real>(sd: &SpectralDensity<T>, beta: T, t_max: T) -> (Vec<T>, Vec<T>) {
    const ORDER: usize = 16;
    let cutoff = sd.frequency_cutoff(beta);
    let mut width = T::lit(2.0) / t_max;
    if sd.table.is_none() {
        width = width.min(sd.omega_c / T::lit(8.0));
    }
    let mut breaks = vec![T::zero()];
    if let Some(t) = &sd.table {
        breaks.extend(t.iter().map(|&(w, _)| w).filter(|&w| w > T::zero()));
    }
    let thermal_edge = if beta.is_finite() {
        (T::lit(40.0) / beta).min(cutoff)
    } else {
        T::zero()
    };
    if thermal_edge > T::zero() {
        breaks.push(thermal_edge);
    }
    breaks.push(cutoff);
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    breaks.dedup();

    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for seg in breaks.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let h = if b <= thermal_edge {
            width.min(T::lit(2.0) / beta)
        } else {
            width
        };
        let panels = ((b - a) / h).ceil().to_f64_lossy().max(1.0) as usize;
        let (x, w) = composite_gauss_legendre(a, b, panels, ORDER);
        nodes.extend(x);
        weights.extend(w);
    }
    (nodes, weights)
}

/// Time-dependent external drive entering the Hamiltonian as
/// `f1(t) x + f2(t) p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum DriveProfile<T> {
    #[default]
    Zero,
    Constant {
        value: T,
    },
    Harmonic {
        amplitude: T,
        frequency: T,
        #[serde(default)]
        phase: T,
    },
    /// Linear interpolation between `(t, f)` knots, held constant outside.
    PiecewiseLinear {
        times: Vec<T>,
        values: Vec<T>,
    },
}


impl<T: Real> DriveProfile<T> {
    pub fn value(&self, t: T) -> T {
        match self {
            Self::Zero => T::zero(),
            Self::Constant { value } => *value,
            Self::Harmonic {
                amplitude,
                frequency,
                phase,
            } => *amplitude * (*frequency * t + *phase).cos(),
            Self::PiecewiseLinear { times, values } => {
                if times.is_empty() {
                    return T::zero();
                }
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let k = times.partition_point(|&s| s <= t);
                let (t0, t1) = (times[k - 1], times[k]);
                values[k - 1] + (values[k] - values[k - 1]) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// True when the profile is identically zero.
    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => *value == T::zero(),
            Self::Harmonic { amplitude, .. } => *amplitude == T::zero(),
            Self::PiecewiseLinear { values, .. } => values.iter().all(|&v| v == T::zero()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::PiecewiseLinear { times, values } => {
                if times.len() != values.len() || times.is_empty() {
                    return Err(invalid(
                        "drive",
                        "piecewise profile needs equally many (>= 1) times and values",
                    ));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("drive", "piecewise knots must be strictly increasing"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Samples on every grid node.
    pub fn sample(&self, grid: &TimeGrid<T>) -> Vec<T> {
        grid.times().map(|t| self.value(t)).collect()
    }
}

/// Oscillator parameters. The renormalized frequency satisfies
/// `omega^2 = omega_0^2 + counter_term` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams<T> {
    mass: T,
    omega_0_sq: T,
    omega: T,
    beta: T,
    f1: DriveProfile<T>,
    f2: DriveProfile<T>,
}

impl<T: Real> SystemParams<T> {
    /// From the bare frequency; the counter-term of `sd` is added.
    pub fn from_bare(mass: T, omega_0: T, beta: T, sd: &SpectralDensity<T>) -> Result<Self> {
        if !(omega_0 >= T::zero()) || !omega_0.is_finite() {
            return Err(invalid("omega_0", format!("must be finite and non-negative, got {omega_0}")));
        }
        let shift = counter_term(sd, mass)?;
        let omega_sq = omega_0 * omega_0 + shift;
        Self::build(mass, omega_0 * omega_0, omega_sq.sqrt(), beta)
    }

    /// From the renormalized frequency directly. The implied bare
    /// `omega_0^2 = omega^2 - counter_term` may be negative.
    pub fn from_renormalized(mass: T, omega: T, beta: T, sd: &SpectralDensity<T>) -> Result<Self> {
        let shift = counter_term(sd, mass)?;
        Self::build(mass, omega * omega - shift, omega, beta)
    }

    fn build(mass: T, omega_0_sq: T, omega: T, beta: T) -> Result<Self> {
        if !(mass > T::zero()) || !mass.is_finite() {
            return Err(invalid("mass", format!("must be positive, got {mass}")));
        }
        if !(omega > T::zero()) || !omega.is_finite() {
            return Err(invalid("omega", format!("renormalized frequency must be positive, got {omega}")));
        }
        if !(beta > T::zero()) {
            return Err(invalid("beta", format!("must be positive or infinite, got {beta}")));
        }
        Ok(Self {
            mass,
            omega_0_sq,
            omega,
            beta,
            f1: DriveProfile::Zero,
            f2: DriveProfile::Zero,
        })
    }

    /// Attaches the force (`f1`) and velocity-coupling (`f2`) drives.
    pub fn with_drive(mut self, f1: DriveProfile<T>, f2: DriveProfile<T>) -> Result<Self> {
        f1.validate()?;
        f2.validate()?;
        self.f1 = f1;
        self.f2 = f2;
        Ok(self)
    }

    pub fn mass(&self) -> T {
        self.mass
    }

    /// Bare frequency, `None` when `omega_0^2 < 0`.
    pub fn bare_frequency(&self) -> Option<T> {
        (self.omega_0_sq >= T::zero()).then(|| self.omega_0_sq.sqrt())
    }

    pub fn bare_frequency_sq(&self) -> T {
        self.omega_0_sq
    }

    pub fn renormalized_frequency(&self) -> T {
        self.omega
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn drive_f1(&self) -> &DriveProfile<T> {
        &self.f1
    }

    pub fn drive_f2(&self) -> &DriveProfile<T> {
        &self.f2
    }

    pub fn is_driven(&self) -> bool {
        !(self.f1.is_zero() && self.f2.is_zero())
    }
}
