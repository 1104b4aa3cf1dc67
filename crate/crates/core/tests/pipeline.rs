use proptest::prelude::*;
use qbm_core::hpz::hpz_coefficients;
use qbm_core::master::{
    assemble_coefficients, markovian_coefficients, propagate_fock, propagate_moments, CoefficientSet, Coefficients,
};
use qbm_core::volterra::solve_kernels;
use qbm_core::{correlation, DensityMatrix, DriveProfile, GaussianState, SpectralDensity, SystemParams, TimeGrid};

fn coefficients(sd: &SpectralDensity, sys: &SystemParams, beta: f64, grid: &TimeGrid<f64>) -> CoefficientSet<f64> {
    let alpha = correlation(sd, beta, grid).unwrap();
    assemble_coefficients(&solve_kernels(&alpha, sys, grid).unwrap(), &alpha, grid).unwrap()
}

#[test]
fn integral_and_green_function_routes_agree() {
    let sd = SpectralDensity::exponential(0.2, 5.0).unwrap();
    let grid = TimeGrid::new(5.0, 100).unwrap();
    let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
    let alpha = correlation(&sd, 1.0, &grid).unwrap();
    let a = assemble_coefficients(&solve_kernels(&alpha, &sys, &grid).unwrap(), &alpha, &grid).unwrap();
    let b = hpz_coefficients(&alpha, &sys, &grid).unwrap();
    let dev = a.relative_deviation(&b).unwrap();
    for d in dev {
        assert!(d < 5e-3, "{dev:?}");
    }
    assert_eq!(a.reality_defect(), [0.0; 4]);
}

#[test]
fn uncoupled_oscillator_has_vanishing_coefficients() {
    let sd = SpectralDensity::zero();
    let grid = TimeGrid::new(4.0, 40).unwrap();
    let sys = SystemParams::from_bare(1.0, 1.5, 2.0, &sd).unwrap();
    let c = coefficients(&sd, &sys, 2.0, &grid);
    for j in 1..=4 {
        assert_eq!(c.max_abs(j), 0.0);
    }
}

#[test]
fn closed_system_follows_classical_orbit() {
    let sd = SpectralDensity::zero();
    let grid = TimeGrid::new(4.0 * std::f64::consts::PI, 200).unwrap();
    let (m, w) = (1.5, 1.2);
    let sys = SystemParams::from_bare(m, w, 1.0, &sd).unwrap();
    let c = coefficients(&sd, &sys, 1.0, &grid);
    let (x0, p0) = (0.4, -0.3);
    let rho0 = DensityMatrix::coherent(30, m, w, x0, p0);
    let ev = propagate_fock(&rho0, &c, &sys, &grid).unwrap();
    for (k, g) in ev.moments().iter().enumerate() {
        let t = grid.time(k);
        let x = x0 * (w * t).cos() + p0 / (m * w) * (w * t).sin();
        let p = p0 * (w * t).cos() - m * w * x0 * (w * t).sin();
        assert!((g.mean_x - x).abs() < 1e-8 && (g.mean_p - p).abs() < 1e-8);
    }
}

#[test]
fn zero_drive_is_bit_identical_to_undriven() {
    let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
    let grid = TimeGrid::new(3.0, 60).unwrap();
    let plain = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
    let zero = plain
        .clone()
        .with_drive(DriveProfile::Zero, DriveProfile::Constant { value: 0.0 })
        .unwrap();
    let a = coefficients(&sd, &plain, 1.0, &grid);
    let b = coefficients(&sd, &zero, 1.0, &grid);
    for j in 1..=4 {
        assert_eq!(a.series(j), b.series(j));
    }
    assert_eq!(a.shift(), b.shift());
    let g0 = GaussianState::coherent(1.0, plain.renormalized_frequency(), 0.2, 0.0);
    assert_eq!(
        propagate_moments(&g0, &a, &plain, &grid).unwrap(),
        propagate_moments(&g0, &b, &zero, &grid).unwrap()
    );
}

#[test]
fn damping_relaxes_the_mean() {
    let sd = SpectralDensity::drude(0.3, 5.0).unwrap();
    let grid = TimeGrid::new(15.0, 150).unwrap();
    let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
    let c = coefficients(&sd, &sys, 1.0, &grid);
    let g0 = GaussianState::coherent(1.0, sys.renormalized_frequency(), 1.0, 0.0);
    let rows = propagate_moments(&g0, &c, &sys, &grid).unwrap();
    let energy = |g: &GaussianState| g.mean_p.powi(2) + sys.renormalized_frequency().powi(2) * g.mean_x.powi(2);
    assert!(energy(&rows[150]) < 0.5 * energy(&rows[0]));
    assert!(rows.iter().all(|g| g.is_physical()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constant_generators_preserve_trace_and_hermiticity(
        a1 in -0.2f64..0.2, a2 in 0.0f64..0.2, a3 in -0.2f64..0.2, a4 in -0.3f64..0.0,
    ) {
        let grid = TimeGrid::new(2.0, 20).unwrap();
        let sys = SystemParams::from_renormalized(1.0, 1.0, 1.0, &SpectralDensity::zero()).unwrap();
        let c = CoefficientSet::constant(grid, Coefficients { a1, a2, a3, a4, shift: 0.0 });
        let rho0 = DensityMatrix::coherent(24, 1.0, 1.0, 0.3, 0.1);
        let ev = propagate_fock(&rho0, &c, &sys, &grid).unwrap();
        prop_assert!(ev.max_trace_drift() < 1e-12);
        prop_assert!(ev.max_hermiticity_defect() < 1e-12);
    }

    #[test]
    fn markov_diffusion_only_touches_second_moments(d in 0.01f64..0.5) {
        let grid = TimeGrid::new(3.0, 60).unwrap();
        let sys = SystemParams::from_renormalized(1.0, 1.0, 1.0, &SpectralDensity::zero()).unwrap();
        let c = markovian_coefficients(d, 0.0, &grid);
        let g0 = GaussianState::coherent(1.0, 1.0, 0.5, 0.0);
        let rows = propagate_moments(&g0, &c, &sys, &grid).unwrap();
        for (k, g) in rows.iter().enumerate() {
            let t = grid.time(k);
            prop_assert!((g.mean_x - 0.5 * t.cos()).abs() < 1e-6);
            prop_assert!(g.var_xx >= g0.var_xx - 1e-12);
        }
    }
}
