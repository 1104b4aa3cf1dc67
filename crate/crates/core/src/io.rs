//! Text output helpers shared by the CSV writers.

use crate::scalar::Real;

/// Formats a value with 17 significant digits.
pub fn fmt_num<T: Real>(x: T) -> String {
    format!("{:.16e}", x.to_f64_lossy())
}
