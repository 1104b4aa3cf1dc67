//! Frequency-domain quadrature: fixed Gauss–Legendre panels and an adaptive
//! Gauss–Kronrod (7/15) integrator with a half-line mapping.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0_f64; n];
    let mut weights = vec![0.0_f64; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and its derivative.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (
        nodes.into_iter().map(T::lit).collect(),
        weights.into_iter().map(T::lit).collect(),
    )
}

/// Composite Gauss–Legendre rule: `n_panels` equal panels on `[a, b]`, each
/// carrying `order` nodes. Returns flattened `(nodes, weights)`.
pub fn composite_gauss_legendre<T: Real>(
    a: T,
    b: T,
    n_panels: usize,
    order: usize,
) -> (Vec<T>, Vec<T>) {
    let (x, w) = gauss_legendre::<T>(order);
    let h = (b - a) / T::from_count(n_panels);
    let half = T::lit(0.5) * h;
    let mut nodes = Vec::with_capacity(n_panels * order);
    let mut weights = Vec::with_capacity(n_panels * order);
    for p in 0..n_panels {
        let mid = a + (T::from_count(p) + T::lit(0.5)) * h;
        for (xi, wi) in x.iter().zip(&w) {
            nodes.push(mid + half * *xi);
            weights.push(half * *wi);
        }
    }
    (nodes, weights)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights on XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Segment<T> {
    a: T,
    b: T,
    value: T,
    error: T,
}

fn kronrod15<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> Segment<T> {
    let half = T::lit(0.5) * (b - a);
    let mid = T::lit(0.5) * (a + b);
    let fc = f(mid);
    let mut k = fc * T::lit(WGK[7]);
    let mut g = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = half * T::lit(XGK[j]);
        let s = f(mid - dx) + f(mid + dx);
        k += T::lit(WGK[j]) * s;
        if j % 2 == 1 {
            g += T::lit(WG[j / 2]) * s;
        }
    }
    Segment {
        a,
        b,
        value: k * half,
        error: ((k - g) * half).abs(),
    }
}

/// Adaptive Gauss–Kronrod quadrature of `f` over `[a, b]`.
///
/// Bisects the worst segment until the summed error estimate drops below
/// `max(abs_tol, rel_tol * |I|)`. Non-finite integrand values are reported
/// as a divergence.
pub fn integrate_adaptive<T: Real, F: Fn(T) -> T>(
    f: F,
    a: T,
    b: T,
    rel_tol: T,
    abs_tol: T,
) -> Result<T> {
    const MAX_SEGMENTS: usize = 4000;
    let mut segments = vec![kronrod15(&f, a, b)];
    loop {
        let total: T = segments.iter().map(|s| s.value).sum();
        let err: T = segments.iter().map(|s| s.error).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Divergent(
                "integrand produced a non-finite value".into(),
            ));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if segments.len() >= MAX_SEGMENTS {
            return Err(Error::QuadratureTolerance {
                tolerance: rel_tol.to_f64_lossy(),
                estimate: (err / total.abs()).to_f64_lossy(),
            });
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, s)| {
                if s.error > acc.1 {
                    (i, s.error)
                } else {
                    acc
                }
            });
        let s = segments.swap_remove(worst);
        let mid = T::lit(0.5) * (s.a + s.b);
        segments.push(kronrod15(&f, s.a, mid));
        segments.push(kronrod15(&f, mid, s.b));
    }
}

/// Adaptive quadrature over `[0, inf)` through `w = scale * u / (1 - u)`.
pub fn integrate_half_line<T: Real, F: Fn(T) -> T>(
    f: F,
    scale: T,
    rel_tol: T,
    abs_tol: T,
) -> Result<T> {
    let mapped = |u: T| {
        let one_minus = T::one() - u;
        let w = scale * u / one_minus;
        f(w) * scale / (one_minus * one_minus)
    };
    integrate_adaptive(mapped, T::zero(), T::one(), rel_tol, abs_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_high_degree_polynomials() {
        let (x, w) = gauss_legendre::<f64>(16);
        let wsum: f64 = w.iter().sum();
        assert!((wsum - 2.0).abs() < 1e-14);
        // x^30 integrates to 2/31 on [-1, 1].
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((s - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn composite_rule_integrates_oscillatory_function() {
        let (x, w) = composite_gauss_legendre::<f64>(0.0, 20.0, 20, 16);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (3.0 * x).cos()).sum();
        assert!((s - (60.0_f64).sin() / 3.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let v = integrate_adaptive(|x: f64| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-12, 0.0).unwrap();
        let exact = 2.0 * (1.0 / 1e-2) * (1.0_f64 / 1e-2).atan();
        assert!((v - exact).abs() / exact < 1e-11);
    }

    #[test]
    fn half_line_lorentzian() {
        let v = integrate_half_line(|x: f64| 1.0 / (1.0 + x * x), 1.0, 1e-12, 0.0).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn adaptive_reports_divergence() {
        let r = integrate_adaptive(|x: f64| 1.0 / x, 0.0, 1.0, 1e-10, 0.0);
        assert!(r.is_err());
    }
}
