//! TOML run configuration.

use std::path::{Path, PathBuf};

use qbm_core::{DriveProfile, GaussianState, SpectralDensity, SystemParams, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub bath: BathConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub fock: FockConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Give exactly one of `omega_0` (bare) or `omega` (renormalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Inverse temperature; `inf` for zero temperature.
    pub beta: f64,
    #[serde(default)]
    pub f1: DriveProfile<f64>,
    #[serde(default)]
    pub f2: DriveProfile<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BathConfig {
    #[default]
    None,
    Drude {
        eta: f64,
        omega_c: f64,
    },
    Exponential {
        eta: f64,
        omega_c: f64,
    },
    /// `(omega, J)` samples.
    Tabulated {
        table: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockConfig {
    #[serde(default = "default_levels")]
    pub n_levels: usize,
}

fn default_levels() -> usize {
    40
}

impl Default for FockConfig {
    fn default() -> Self {
        Self {
            n_levels: default_levels(),
        }
    }
}

/// Displaced thermal state of the renormalized oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub p0: f64,
    #[serde(default)]
    pub nbar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_traj")]
    pub n_traj: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// When set, the master equation is solved on a grid with this many
    /// steps (dividing `grid.n_steps`) and compared against the ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_steps: Option<usize>,
}

fn default_traj() -> usize {
    1000
}

fn default_noise_scale() -> f64 {
    1.0
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_traj: default_traj(),
            base_seed: 0,
            noise_scale: default_noise_scale(),
            reference_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Correlation,
    Kernels,
    Coefficients,
    Moments,
    Snapshots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_tables")]
    pub tables: Vec<Table>,
    /// Node stride between density-matrix snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

fn default_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_tables() -> Vec<Table> {
    vec![Table::Coefficients, Table::Moments]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            tables: default_tables(),
            snapshot_stride: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.system;
        if !(s.mass > 0.0) || !s.mass.is_finite() {
            return bad(format!("system.mass must be positive, got {}", s.mass));
        }
        match (s.omega_0, s.omega) {
            (Some(_), Some(_)) => return bad("give only one of system.omega_0 and system.omega".into()),
            (None, None) => return bad("missing key `system.omega_0` (or `system.omega`)".into()),
            (Some(w), None) | (None, Some(w)) if !(w >= 0.0) || !w.is_finite() => {
                return bad(format!("system frequency must be finite and non-negative, got {w}"));
            }
            _ => {}
        }
        if !(s.beta > 0.0) {
            return bad(format!("system.beta must be positive, got {}", s.beta));
        }
        match &self.bath {
            BathConfig::Drude { eta, omega_c } | BathConfig::Exponential { eta, omega_c } => {
                if !(*eta >= 0.0) || !eta.is_finite() {
                    return bad(format!("bath.eta must be non-negative, got {eta}"));
                }
                if !(*omega_c > 0.0) {
                    return bad(format!("bath.omega_c must be positive, got {omega_c}"));
                }
            }
            BathConfig::Tabulated { table } if table.len() < 2 => {
                return bad("bath.table needs at least two samples".into());
            }
            _ => {}
        }
        if self.grid.n_steps < 2 {
            return bad(format!("grid.n_steps must be at least 2, got {}", self.grid.n_steps));
        }
        if !(self.grid.t_max > 0.0) || !self.grid.t_max.is_finite() {
            return bad(format!("grid.t_max must be positive, got {}", self.grid.t_max));
        }
        if self.fock.n_levels < 2 {
            return bad(format!("fock.n_levels must be at least 2, got {}", self.fock.n_levels));
        }
        let i = &self.initial;
        if !(i.nbar >= 0.0) || !i.x0.is_finite() || !i.p0.is_finite() {
            return bad("initial state needs finite x0, p0 and nbar >= 0".into());
        }
        if !(self.mc.noise_scale > 0.0) || !self.mc.noise_scale.is_finite() {
            return bad(format!("mc.noise_scale must be positive, got {}", self.mc.noise_scale));
        }
        if let Some(r) = self.mc.reference_steps {
            if r < 2 || self.grid.n_steps % r != 0 {
                return bad(format!(
                    "mc.reference_steps must be >= 2 and divide grid.n_steps = {}, got {r}",
                    self.grid.n_steps
                ));
            }
        }
        if self.output.snapshot_stride == Some(0) {
            return bad("output.snapshot_stride must be positive".into());
        }
        Ok(())
    }

    pub fn spectral_density(&self) -> Result<SpectralDensity, CliError> {
        Ok(match &self.bath {
            BathConfig::None => SpectralDensity::zero(),
            BathConfig::Drude { eta, omega_c } => SpectralDensity::drude(*eta, *omega_c)?,
            BathConfig::Exponential { eta, omega_c } => SpectralDensity::exponential(*eta, *omega_c)?,
            BathConfig::Tabulated { table } => SpectralDensity::tabulated(table.clone())?,
        })
    }

    pub fn system_params(&self, sd: &SpectralDensity) -> Result<SystemParams, CliError> {
        let s = &self.system;
        let base = match (s.omega_0, s.omega) {
            (Some(w0), _) => SystemParams::from_bare(s.mass, w0, s.beta, sd)?,
            (None, Some(w)) => SystemParams::from_renormalized(s.mass, w, s.beta, sd)?,
            (None, None) => unreachable!("validated"),
        };
        Ok(base.with_drive(s.f1.clone(), s.f2.clone())?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>, CliError> {
        Ok(TimeGrid::new(self.grid.t_max, self.grid.n_steps)?)
    }

    pub fn initial_state(&self, sys: &SystemParams) -> GaussianState {
        let i = &self.initial;
        GaussianState::thermal(self.system.mass, sys.renormalized_frequency(), i.nbar, i.x0, i.p0)
    }

    pub fn wants(&self, t: Table) -> bool {
        self.output.tables.contains(&t)
    }
}
