//! Small dense linear algebra helpers.
//!
//! The systems solved here are tiny (a few dozen unknowns), so a plain LU with
//! partial pivoting is used. Pivoting is deterministic: ties are broken by the
//! lowest row index.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a matrix is treated as singular.
const SINGULAR_PIVOT: f64 = 1e-14;

/// LU factorization `P A = L U` of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

/// A zero (or numerically zero) pivot was met while factorizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularPivot {
    /// Elimination step (column) at which the pivot vanished.
    pub column: usize,
    /// Original row index that would have held the pivot.
    pub row: usize,
    /// Magnitude of the best available pivot.
    pub pivot: f64,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self, SingularPivot> {
        assert!(a.is_square(), "LU of a non-square matrix");
        let n = a.nrows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let norm1 = one_norm(a);
        let scale = if norm1 > 0.0 { norm1 } else { 1.0 };

        for k in 0..n {
            let mut best = k;
            let mut best_val = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            if best_val <= SINGULAR_PIVOT * scale {
                return Err(SingularPivot {
                    column: k,
                    row: perm[best],
                    pivot: best_val,
                });
            }
            if best != k {
                lu.swap_rows(best, k);
                perm.swap(best, k);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= factor * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::from_iterator(self.dim(), self.perm.iter().map(|&p| b[p]));
        self.solve_permuted_in_place(x.as_mut_slice());
        x
    }

    /// Solves for every column of `b` with the same factorization.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, b.ncols());
        let mut col = vec![0.0; n];
        for c in 0..b.ncols() {
            for (i, &p) in self.perm.iter().enumerate() {
                col[i] = b[(p, c)];
            }
            self.solve_permuted_in_place(&mut col);
            for (i, v) in col.iter().enumerate() {
                out[(i, c)] = *v;
            }
        }
        out
    }

    fn solve_permuted_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        // Uᵀ w = b
        let mut w = b.clone();
        for i in 0..n {
            let mut s = w[i];
            for j in 0..i {
                s -= self.lu[(j, i)] * w[j];
            }
            w[i] = s / self.lu[(i, i)];
        }
        // Lᵀ v = w
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in i + 1..n {
                s -= self.lu[(j, i)] * w[j];
            }
            w[i] = s;
        }
        let mut x = DVector::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Estimate of the 1-norm condition number (Hager's method).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 1.0;
        }
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bv), (j, v)| {
                    if v.abs() > bv {
                        (j, v.abs())
                    } else {
                        (bj, bv)
                    }
                });
            if y_norm <= est || zmax <= z.dot(&x) {
                est = est.max(y_norm);
                break;
            }
            est = y_norm;
            x = DVector::zeros(n);
            x[j] = 1.0;
        }
        est * self.norm1
    }
}

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
