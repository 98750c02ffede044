//! Small dense linear-algebra helpers: LU factorisation with partial
//! pivoting for real and complex matrices. Sizes here are tiny (3x3 line
//! impedance blocks, voltage-elimination systems), so a textbook dense
//! factorisation is all that is needed.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is singular (pivot {pivot:.3e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// LU factorisation of a square real matrix, kept for repeated solves.
pub struct LuFactors {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn new(a: &Array2<f64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinalgError::Shape(format!(
                "{}x{} not square",
                n,
                a.ncols()
            )));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut p = col;
            let mut best = lu[[col, col]].abs();
            for r in col + 1..n {
                let v = lu[[r, col]].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best < 1e-14 {
                return Err(LinalgError::Singular { col, pivot: best });
            }
            if p != col {
                perm.swap(p, col);
                for k in 0..n {
                    let tmp = lu[[p, k]];
                    lu[[p, k]] = lu[[col, k]];
                    lu[[col, k]] = tmp;
                }
            }
            let piv = lu[[col, col]];
            for r in col + 1..n {
                let factor = lu[[r, col]] / piv;
                lu[[r, col]] = factor;
                for k in col + 1..n {
                    lu[[r, k]] -= factor * lu[[col, k]];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[[i, k]];
                x[i] -= l * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[[i, k]];
                x[i] -= u * x[k];
            }
            x[i] /= self.lu[[i, i]];
        }
        x
    }

    /// Solves A X = B column by column.
    pub fn solve_matrix(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve(&col.to_owned());
            out.column_mut(j).assign(&x);
        }
        out
    }
}

/// Inverts a small complex matrix by Gauss-Jordan with partial pivoting.
pub fn invert_complex(a: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>, LinalgError> {
    let n = a.len();
    let mut m: Vec<Vec<Complex64>> = a.iter().cloned().collect();
    let mut inv: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    for col in 0..n {
        let mut p = col;
        let mut best = m[col][col].norm();
        for r in col + 1..n {
            if m[r][col].norm() > best {
                best = m[r][col].norm();
                p = r;
            }
        }
        if best < 1e-14 {
            return Err(LinalgError::Singular { col, pivot: best });
        }
        m.swap(p, col);
        inv.swap(p, col);
        let piv = m[col][col];
        for k in 0..n {
            m[col][k] /= piv;
            inv[col][k] /= piv;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                for k in 0..n {
                    let mc = m[col][k];
                    let ic = inv[col][k];
                    m[r][k] -= f * mc;
                    inv[r][k] -= f * ic;
                }
            }
        }
    }
    Ok(inv)
}
