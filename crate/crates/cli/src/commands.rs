use std::path::PathBuf;

use log::{info, warn};
use qbm_core::hpz::hpz_coefficients;
use qbm_core::master::{assemble_coefficients, propagate_fock, propagate_moments_with, write_moment_rows};
use qbm_core::stochastic::{run_ensemble, EnsembleConfig};
use qbm_core::volterra::solve_kernels;
use qbm_core::{correlation, BathCorrelation, CoefficientSet, DensityMatrix, Grid, SystemParams};

use crate::config::{RunConfig, Table};
use crate::error::CliError;
use crate::output::{header, Writer};

/// Fraction of masked nodes above which a comparison is refused.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.05;
/// Largest tolerated share of rejected trajectories.
pub const MAX_REJECTION_RATE: f64 = 0.01;
/// Required share of nodes inside the Monte Carlo band.
pub const MIN_COVERAGE: f64 = 0.95;
pub const COVERAGE_SIGMAS: f64 = 4.0;

/// Result of a successful command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Setup {
    sys: SystemParams,
    grid: Grid,
    alpha: BathCorrelation,
}

fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let sd = cfg.spectral_density()?;
    let sys = cfg.system_params(&sd)?;
    let grid = cfg.time_grid()?;
    let alpha = correlation(&sd, cfg.system.beta, &grid)?;
    Ok(Setup { sys, grid, alpha })
}

fn integral_route(s: &Setup, cfg: &RunConfig, out: &mut Writer) -> Result<CoefficientSet, CliError> {
    let kernels = solve_kernels(&s.alpha, &s.sys, &s.grid)?;
    for w in kernels.warnings() {
        warn!("ill-conditioned kernel solve at t index {} (condition {:e})", w.index, w.condition);
    }
    if cfg.wants(Table::Kernels) {
        for t in kernels.tables() {
            out.write(&format!("kernel_{}.csv", t.kind().name()), |b| t.write_csv(b))?;
        }
    }
    Ok(assemble_coefficients(&kernels, &s.alpha, &s.grid)?)
}

fn writer(cfg: &RunConfig, command: &str) -> Result<Writer, CliError> {
    Writer::new(&cfg.output.directory, header(command, cfg))
}

pub fn cmd_coeffs(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = setup(cfg)?;
    let mut out = writer(cfg, "coeffs")?;
    if cfg.wants(Table::Correlation) {
        out.write("correlation.csv", |b| s.alpha.write_csv(b))?;
    }
    let c = integral_route(&s, cfg, &mut out)?;
    out.write("coefficients.csv", |b| c.write_csv(b))?;
    let summary = format!(
        "max |A1| = {:e}, max |A2| = {:e}, max |A3| = {:e}, max |A4| = {:e}, reality defect {:e}",
        c.max_abs(1),
        c.max_abs(2),
        c.max_abs(3),
        c.max_abs(4),
        c.reality_defect().iter().fold(0.0f64, |m, v| m.max(*v))
    );
    Ok(Outcome {
        summary,
        files: out.written().to_vec(),
    })
}

/// Per-coefficient comparison of the two constructions.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub deviation: [f64; 4],
    pub masked: usize,
    pub nodes: usize,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn compare(a: &CoefficientSet, b: &CoefficientSet, tolerance: f64) -> Result<Self, CliError> {
        let masked = (0..a.grid().len())
            .filter(|&k| !a.valid()[k] || !b.valid()[k])
            .count();
        Ok(Self {
            deviation: a.relative_deviation(b)?,
            masked,
            nodes: a.grid().len(),
            tolerance,
        })
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked as f64 / self.nodes as f64
    }

    pub fn worst(&self) -> f64 {
        self.deviation.iter().fold(0.0f64, |m, d| m.max(*d))
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance && self.masked_fraction() <= MAX_DEGENERATE_FRACTION
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# masked nodes: {} of {}", self.masked, self.nodes)?;
        writeln!(w, "coefficient,rel_deviation,tolerance,pass")?;
        for (j, d) in self.deviation.iter().enumerate() {
            writeln!(
                w,
                "A{},{},{},{}",
                j + 1,
                qbm_core::io::fmt_num(*d),
                qbm_core::io::fmt_num(self.tolerance),
                *d <= self.tolerance
            )?;
        }
        Ok(())
    }

    /// Maps the report onto the command result.
    pub fn verdict(&self) -> Result<(), CliError> {
        if self.masked_fraction() > MAX_DEGENERATE_FRACTION {
            return Err(CliError::TooDegenerate(format!(
                "{} of {} nodes are degenerate (limit {:.0}%)",
                self.masked,
                self.nodes,
                100.0 * MAX_DEGENERATE_FRACTION
            )));
        }
        if self.worst() > self.tolerance {
            return Err(CliError::CheckFailed(format!(
                "routes differ by {:e} (tolerance {:e})",
                self.worst(),
                self.tolerance
            )));
        }
        Ok(())
    }
}

pub fn cmd_check_equivalence(cfg: &RunConfig, tolerance: f64) -> Result<Outcome, CliError> {
    if !(tolerance > 0.0) {
        return Err(CliError::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let s = setup(cfg)?;
    let mut out = writer(cfg, "check-equivalence")?;
    let a = integral_route(&s, cfg, &mut out)?;
    let b = hpz_coefficients(&s.alpha, &s.sys, &s.grid)?;
    for k in (0..b.grid().len()).filter(|&k| !b.valid()[k]) {
        warn!("degenerate node excluded at t = {}", b.grid().time(k));
    }
    if cfg.wants(Table::Coefficients) {
        out.write("coefficients_integral.csv", |w| a.write_csv(w))?;
        out.write("coefficients_green.csv", |w| b.write_csv(w))?;
    }
    let report = EquivalenceReport::compare(&a, &b, tolerance)?;
    out.write("equivalence.csv", |w| report.write_csv(w))?;
    let d = report.deviation;
    let summary = format!(
        "relative deviation A1 {:e}, A2 {:e}, A3 {:e}, A4 {:e}; {} of {} nodes excluded; {}",
        d[0],
        d[1],
        d[2],
        d[3],
        report.masked,
        report.nodes,
        if report.passed() { "pass" } else { "FAIL" }
    );
    if let Err(e) = report.verdict() {
        println!("{summary}");
        return Err(e);
    }
    Ok(Outcome {
        summary,
        files: out.written().to_vec(),
    })
}

pub fn cmd_evolve(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = setup(cfg)?;
    let mut out = writer(cfg, "evolve")?;
    let c = integral_route(&s, cfg, &mut out)?;
    if cfg.wants(Table::Coefficients) {
        out.write("coefficients.csv", |w| c.write_csv(w))?;
    }
    let g0 = cfg.initial_state(&s.sys);
    let (m, w) = (s.sys.mass(), s.sys.renormalized_frequency());
    let rho0 = DensityMatrix::from_gaussian(cfg.fock.n_levels, m, w, &g0)?;
    let ev = propagate_fock(&rho0, &c, &s.sys, &s.grid)?;
    let gauss = propagate_moments_with(&g0, &c, &s.sys, &s.grid, ev.substeps)?;
    if cfg.wants(Table::Moments) {
        out.write("moments_fock.csv", |w| ev.write_moments_csv(w))?;
        out.write("moments_gaussian.csv", |w| write_moment_rows(w, &s.grid, &gauss))?;
    }
    if cfg.wants(Table::Snapshots) {
        let stride = cfg.output.snapshot_stride.unwrap_or(s.grid.n_steps());
        let mut nodes: Vec<usize> = (0..s.grid.len()).step_by(stride).collect();
        if nodes.last() != Some(&s.grid.n_steps()) {
            nodes.push(s.grid.n_steps());
        }
        out.write("snapshots.csv", |w| ev.write_snapshots_csv(w, &nodes))?;
    }
    let diff = ev
        .moments()
        .iter()
        .zip(&gauss)
        .fold(0.0f64, |mx, (a, b)| mx.max(a.max_abs_diff(b)));
    if !ev.leakage.is_empty() {
        warn!(
            "truncation leakage at {} nodes; increase fock.n_levels",
            ev.leakage.len()
        );
    }
    let summary = format!(
        "trace drift {:e}, hermiticity defect {:e}, Fock vs Gaussian moments {:e}, {} substeps",
        ev.max_trace_drift(),
        ev.max_hermiticity_defect(),
        diff,
        ev.substeps
    );
    Ok(Outcome {
        summary,
        files: out.written().to_vec(),
    })
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = setup(cfg)?;
    let mut out = writer(cfg, "sample")?;
    let g0 = cfg.initial_state(&s.sys);
    let (m, w) = (s.sys.mass(), s.sys.renormalized_frequency());
    let rho0 = DensityMatrix::from_gaussian(cfg.fock.n_levels, m, w, &g0)?;
    let ens = EnsembleConfig {
        n_traj: cfg.mc.n_traj,
        base_seed: cfg.mc.base_seed,
        noise_scale: cfg.mc.noise_scale,
    };
    let stats = run_ensemble(&s.alpha, &s.sys, &s.grid, &rho0, ens)?;
    out.write("ensemble.csv", |w| stats.write_csv(w))?;
    let mut summary = format!(
        "{} trajectories accepted, {} rejected, final trace {} +/- {}",
        stats.n_accepted,
        stats.rejected_seeds.len(),
        stats.rows.last().map_or(f64::NAN, |r| r.trace_re),
        stats.rows.last().map_or(f64::NAN, |r| r.se_trace)
    );
    let mut failure = None;
    if stats.rejection_rate() > MAX_REJECTION_RATE {
        failure = Some(format!(
            "rejection rate {:.2}% exceeds {:.0}%",
            100.0 * stats.rejection_rate(),
            100.0 * MAX_REJECTION_RATE
        ));
    }
    if let Some(steps) = cfg.mc.reference_steps {
        let coarse = Grid::new(s.grid.t_max(), steps)?;
        let stride = s.grid.n_steps() / steps;
        let alpha = correlation(&cfg.spectral_density()?, cfg.system.beta, &coarse)?;
        let kernels = solve_kernels(&alpha, &s.sys, &coarse)?;
        let c = assemble_coefficients(&kernels, &alpha, &coarse)?;
        let me = propagate_moments_with(&g0, &c, &s.sys, &coarse, 20)?;
        let inside = (1..coarse.len())
            .filter(|&k| {
                let r = stats.rows[k * stride];
                (r.mean_x - me[k].mean_x).abs() <= COVERAGE_SIGMAS * r.se_x
                    && (r.mean_p - me[k].mean_p).abs() <= COVERAGE_SIGMAS * r.se_p
                    && (r.trace_re - 1.0).abs() <= COVERAGE_SIGMAS * r.se_trace
            })
            .count();
        let frac = inside as f64 / steps as f64;
        summary.push_str(&format!(
            "; master equation inside {COVERAGE_SIGMAS} sigma at {inside}/{steps} nodes"
        ));
        if frac < MIN_COVERAGE && failure.is_none() {
            failure = Some(format!(
                "coverage {:.1}% below {:.0}%",
                100.0 * frac,
                100.0 * MIN_COVERAGE
            ));
        }
    }
    info!("{summary}");
    if let Some(f) = failure {
        println!("{summary}");
        return Err(CliError::CheckFailed(f));
    }
    Ok(Outcome {
        summary,
        files: out.written().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use qbm_core::SpectralDensity;

    #[test]
    fn corrupted_friction_sign_is_caught() {
        let sd = SpectralDensity::drude(0.2, 5.0).unwrap();
        let grid = Grid::new(5.0, 100).unwrap();
        let sys = SystemParams::from_bare(1.0, 1.0, 1.0, &sd).unwrap();
        let alpha = correlation(&sd, 1.0, &grid).unwrap();
        let bad = alpha.negated_imag();
        let a = assemble_coefficients(&solve_kernels(&bad, &sys, &grid).unwrap(), &bad, &grid).unwrap();
        let b = hpz_coefficients(&alpha, &sys, &grid).unwrap();
        let report = EquivalenceReport::compare(&a, &b, 1e-3).unwrap();
        assert!(!report.passed());
        assert!(report.worst() > 0.1, "{report:?}");
        assert_eq!(report.verdict().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn degeneracy_outranks_deviation() {
        let mut r = EquivalenceReport {
            deviation: [0.0, 0.5, 0.0, 0.0],
            masked: 10,
            nodes: 100,
            tolerance: 1e-3,
        };
        assert_eq!(r.verdict().unwrap_err().exit_code(), 3);
        r.masked = 5;
        assert_eq!(r.verdict().unwrap_err().exit_code(), 2);
        r.deviation[1] = 1e-4;
        assert!(r.verdict().is_ok() && r.passed());
    }
}
