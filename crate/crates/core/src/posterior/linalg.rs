//! Small dense linear algebra used by the oracle paths: direct solves,
//! shifted Cholesky for PSD checks, and numerical rank.

use crate::error::{CoreError, Result};

/// Row-major square matrix, small enough for direct methods.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(dim: usize) -> Self {
        DenseMatrix {
            dim,
            values: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = DenseMatrix::zeros(dim);
        for i in 0..dim {
            *m.at_mut(i, i) = 1.0;
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.values[i * self.dim + j]
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.dim {
            *self.at_mut(i, i) += shift;
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.values[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Direct solve by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        if rhs.len() != n {
            return Err(CoreError::DimensionMismatch {
                axis: "rhs".into(),
                expected: n,
                got: rhs.len(),
            });
        }
        let mut a = self.values.clone();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let mut pivot = col;
            for row in col + 1..n {
                if a[row * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = row;
                }
            }
            if a[pivot * n + col].abs() < 1e-300 {
                return Err(CoreError::invalid_config(
                    "singular matrix in dense solve; add damping",
                ));
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(col * n + k, pivot * n + k);
                }
                b.swap(col, pivot);
            }
            let inv = 1.0 / a[col * n + col];
            for row in col + 1..n {
                let factor = a[row * n + col] * inv;
                if factor == 0.0 {
                    continue;
                }
                for k in col..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
                b[row] -= factor * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row * n + k] * x[k];
            }
            x[row] = acc / a[row * n + row];
        }
        Ok(x)
    }

    /// True when `self + shift * I` admits a Cholesky factorisation, i.e.
    /// the smallest eigenvalue is at least `-shift`.
    pub fn shifted_cholesky_ok(&self, shift: f64) -> bool {
        let n = self.dim;
        let mut a = self.values.clone();
        for i in 0..n {
            a[i * n + i] += shift;
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum < 0.0 {
                        return false;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    if l[j * n + j] == 0.0 {
                        return false;
                    }
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        true
    }

    /// Numerical rank via row echelon with a relative tolerance.
    pub fn rank(&self, tol: f64) -> usize {
        let n = self.dim;
        let mut a = self.values.clone();
        let scale = a
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let mut rank = 0;
        let mut row = 0;
        for col in 0..n {
            let mut pivot = row;
            for r in row..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            if a[pivot * n + col].abs() <= tol * scale {
                continue;
            }
            for k in 0..n {
                a.swap(row * n + k, pivot * n + k);
            }
            let inv = 1.0 / a[row * n + col];
            for r in 0..n {
                if r == row {
                    continue;
                }
                let factor = a[r * n + col] * inv;
                for k in 0..n {
                    a[r * n + k] -= factor * a[row * n + k];
                }
            }
            rank += 1;
            row += 1;
            if row == n {
                break;
            }
        }
        rank
    }
}
