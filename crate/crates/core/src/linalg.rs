//! Dense LU factorization with partial pivoting for the per-final-time
//! Fredholm systems.

use crate::error::{Error, Result};
use crate::scalar::{Cplx, Real};

/// Row-major LU factors of a square matrix, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    norm1: T,
}

impl<T: Real> Lu<T> {
    /// Factorizes the row-major `n x n` matrix `a`. `index` only labels the
    /// error on an exactly singular pivot.
    pub fn factor(mut a: Vec<T>, n: usize, index: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut norm1 = T::zero();
        for c in 0..n {
            let col: T = (0..n).map(|r| a[r * n + c].abs()).sum();
            norm1 = norm1.max(col);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for r in k + 1..n {
                let v = a[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::Singular { index });
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            let (upper, lower) = a.split_at_mut((k + 1) * n);
            let row_k = &upper[k * n..];
            for r in 0..n - k - 1 {
                let row = &mut lower[r * n..(r + 1) * n];
                let f = row[k] / pivot;
                row[k] = f;
                if f != T::zero() {
                    for c in k + 1..n {
                        row[c] -= f * row_k[c];
                    }
                }
            }
        }
        Ok(Self { n, lu: a, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let mut y: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let row = &self.lu[r * n..r * n + r];
            let s: T = row.iter().zip(&y[..r]).map(|(l, v)| *l * *v).sum();
            y[r] -= s;
        }
        for r in (0..n).rev() {
            let row = &self.lu[r * n..(r + 1) * n];
            let s: T = row[r + 1..].iter().zip(&y[r + 1..]).map(|(u, v)| *u * *v).sum();
            y[r] = (y[r] - s) / row[r];
        }
        b.copy_from_slice(&y);
    }

    /// Solves `A x = b` for a complex right-hand side (real and imaginary
    /// parts separately).
    pub fn solve_complex(&self, b: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let mut re: Vec<T> = b.iter().map(|z| z.re).collect();
        let mut im: Vec<T> = b.iter().map(|z| z.im).collect();
        self.solve_in_place(&mut re);
        self.solve_in_place(&mut im);
        re.into_iter().zip(im).map(|(r, i)| Cplx::new(r, i)).collect()
    }

    /// Solves `A^T x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [T]) {
        let n = self.n;
        // U^T z = b
        let mut z = b.to_vec();
        for r in 0..n {
            let mut s = z[r];
            for k in 0..r {
                s -= self.lu[k * n + r] * z[k];
            }
            z[r] = s / self.lu[r * n + r];
        }
        // L^T w = z
        for r in (0..n).rev() {
            let mut s = z[r];
            for k in r + 1..n {
                s -= self.lu[k * n + r] * z[k];
            }
            z[r] = s;
        }
        for (r, &p) in self.perm.iter().enumerate() {
            b[p] = z[r];
        }
    }

    /// Estimate of the 1-norm condition number (Hager's method).
    pub fn condition_estimate(&self) -> T {
        let n = self.n;
        let mut x = vec![T::one() / T::from_count(n); n];
        let mut est = T::zero();
        for _ in 0..5 {
            let mut y = x.clone();
            self.solve_in_place(&mut y);
            let norm: T = y.iter().map(|v| v.abs()).sum();
            if norm <= est {
                break;
            }
            est = norm;
            let mut z: Vec<T> = y
                .iter()
                .map(|v| if *v >= T::zero() { T::one() } else { -T::one() })
                .collect();
            self.solve_transpose_in_place(&mut z);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, T::zero()), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
            let ztx: T = z.iter().zip(&x).map(|(a, b)| *a * *b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![T::zero(); n];
            x[jmax] = T::one();
        }
        est * self.norm1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        (0..n).map(|r| (0..n).map(|c| a[r * n + c] * x[c]).sum()).collect()
    }

    #[test]
    fn solves_pivoting_system() {
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x = [1.0, -2.0, 0.5];
        let mut b = matvec(&a, &x, 3);
        let lu = Lu::factor(a.clone(), 3, 0).unwrap();
        lu.solve_in_place(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-14);
        }
        let mut at = vec![0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                at[c * 3 + r] = a[r * 3 + c];
            }
        }
        let mut bt = matvec(&at, &x, 3);
        lu.solve_transpose_in_place(&mut bt);
        for (u, v) in bt.iter().zip(&x) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn detects_singular_matrix() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(Lu::factor(a, 2, 7), Err(Error::Singular { index: 7 })));
    }

    #[test]
    fn condition_of_diagonal_matrix() {
        let a = vec![1.0_f64, 0.0, 0.0, 1e-6];
        let lu = Lu::factor(a, 2, 0).unwrap();
        let c = lu.condition_estimate();
        assert!((c - 1e6).abs() / 1e6 < 1e-12);
    }
}
