//! Master-equation coefficients and density-matrix propagation in the
//! truncated Fock basis and in the Gaussian moment representation.
//!
//! The equation is
//! `i d rho/dt = [H_eff, rho] + A1 [x,{x,rho}] + A2 [x,{p,rho}] + A3 [x,[p,rho]] + A4 [x,[x,rho]]`
//! with `H_eff = p^2/(2M) + M w^2 x^2 / 2 + (f1 + shift) x + f2 p`.

pub mod coefficients;
pub mod fock;
pub mod moments;

pub use coefficients::{assemble_coefficients, markovian_coefficients, CoefficientSet, Coefficients};
pub use fock::{propagate_fock, propagate_fock_with, DensityMatrix, FockEvolution, FockOptions};
pub use moments::{propagate_moments, propagate_moments_with, write_moment_rows, GaussianState};
