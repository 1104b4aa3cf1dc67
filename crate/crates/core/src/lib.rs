//! Time-dependent master-equation coefficients for a damped, optionally
//! driven harmonic oscillator in a Caldeira–Leggett bath.
//!
//! The pipeline runs bath correlation → kernel tables → coefficients →
//! density-matrix propagation. Two independent constructions of the
//! coefficients ([`volterra`] + [`master::assemble_coefficients`] and
//! [`hpz::hpz_coefficients`]) and a stochastic unraveling ([`stochastic`])
//! cross-check each other.
//!
//! Everything is generic over [`Real`]; the aliases at the crate root fix
//! the scalar to `f64`. Units have `hbar = k_B = 1`.

pub mod bath;
pub mod error;
pub mod grid;
pub mod hpz;
pub mod io;
pub mod linalg;
pub mod master;
pub mod quadrature;
pub mod scalar;
pub mod stochastic;
pub mod volterra;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use scalar::{Cplx, Real};

pub use bath::{correlation, counter_term, DriveProfile, SpectralKind};

pub type SpectralDensity = bath::SpectralDensity<f64>;
pub type BathCorrelation = bath::BathCorrelation<f64>;
pub type SystemParams = bath::SystemParams<f64>;
pub type Grid = grid::TimeGrid<f64>;
pub type KernelTable = volterra::KernelTable<f64>;
pub type KernelSet = volterra::KernelSet<f64>;
pub type CoefficientSet = master::CoefficientSet<f64>;
pub type DensityMatrix = master::DensityMatrix<f64>;
pub type GaussianState = master::GaussianState<f64>;
pub type NoisePath = stochastic::NoisePath<f64>;
