//! Dense Cholesky with jitter escalation, and solves with symmetric positive
//! definite Toeplitz matrices.
//!
//! The Toeplitz routines never form the n x n inverse. Durbin's recursion
//! yields the first column `x` of `T^-1`; every other quantity is recovered
//! from `x` through the Gohberg-Semencul representation
//!
//! ```text
//! T^-1 = (L(x) L(x)^T - L(u) L(u)^T) / x_0,   u = [0, x_{n-1}, ..., x_1]
//! ```
//!
//! where `L(v)` is the lower-triangular Toeplitz matrix with first column `v`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative jitter levels tried after a plain factorization fails.
const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Cholesky factorization that retries with growing diagonal jitter
/// (`level * trace / n`) when the matrix is not numerically positive definite.
pub fn cholesky_jitter<T: Scalar>(m: &DMatrix<T>) -> Result<(Cholesky<T, Dyn>, T)> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, T::zero()));
    }
    let n = m.nrows().max(1);
    let scale = (m.trace() / T::from_usize_lossy(n)).abs();
    let scale = if scale > T::zero() { scale } else { T::one() };
    for level in JITTER_LADDER {
        let jitter = scale * T::lit(level);
        let mut jm = m.clone();
        for i in 0..jm.nrows() {
            jm[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(jm) {
            log::debug!("cholesky needed jitter {:e}", jitter.as_f64());
            return Ok((c, jitter));
        }
    }
    Err(Error::Numeric(format!(
        "{n}x{n} matrix is not positive definite even with jitter"
    )))
}

/// log det of the factored matrix.
pub fn chol_logdet<T: Scalar>(c: &Cholesky<T, Dyn>) -> T {
    let l = c.l_dirty();
    (0..l.nrows()).fold(T::zero(), |acc, i| acc + l[(i, i)].ln()) * T::lit(2.0)
}

/// Inverse of the factored matrix.
pub fn chol_inverse<T: Scalar>(c: &Cholesky<T, Dyn>) -> DMatrix<T> {
    c.inverse()
}

/// Symmetrizes in place: `(m + m^T) / 2`.
pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Implicit inverse of an SPD symmetric Toeplitz matrix.
#[derive(Debug, Clone)]
pub struct ToeplitzInverse<T> {
    /// First column of the inverse.
    x: Vec<T>,
    logdet: T,
}

impl<T: Scalar> ToeplitzInverse<T> {
    /// Factors the matrix whose first row is `first_row`.
    pub fn new(first_row: &[T]) -> Result<Self> {
        let n = first_row.len();
        if n == 0 {
            return Err(Error::Dimension("empty toeplitz matrix".into()));
        }
        let t0 = first_row[0];
        if !(t0 > T::zero()) {
            return Err(Error::Numeric("toeplitz diagonal must be positive".into()));
        }
        let nf = T::from_usize_lossy(n);
        if n == 1 {
            return Ok(ToeplitzInverse {
                x: vec![T::one() / t0],
                logdet: t0.ln(),
            });
        }
        // Durbin on the normalized matrix: solve T_{n-1} y = -r.
        let r: Vec<T> = first_row[1..].iter().map(|&v| v / t0).collect();
        let m = n - 1;
        let mut y = vec![T::zero(); m];
        let mut z = vec![T::zero(); m];
        y[0] = -r[0];
        let mut beta = T::one();
        let mut alpha = -r[0];
        let mut logdet = T::zero();
        for k in 1..m {
            beta = (T::one() - alpha * alpha) * beta;
            if !(beta > T::zero()) {
                return Err(Error::Numeric(format!(
                    "toeplitz matrix not positive definite at order {k}"
                )));
            }
            logdet += beta.ln();
            let mut acc = r[k];
            for i in 0..k {
                acc += r[k - 1 - i] * y[i];
            }
            alpha = -acc / beta;
            for i in 0..k {
                z[i] = y[i] + alpha * y[k - 1 - i];
            }
            y[..k].copy_from_slice(&z[..k]);
            y[k] = alpha;
        }
        let gamma = T::one() + r.iter().zip(&y).fold(T::zero(), |a, (&ri, &yi)| a + ri * yi);
        if !(gamma > T::zero()) {
            return Err(Error::Numeric(
                "toeplitz matrix not positive definite at full order".into(),
            ));
        }
        // det of the normalized matrix is the product of prediction-error
        // variances of orders 1..n-1; the loop covered all but the last.
        logdet += gamma.ln();
        let mut x = Vec::with_capacity(n);
        let scale = T::one() / (t0 * gamma);
        x.push(scale);
        x.extend(y.iter().map(|&v| v * scale));
        Ok(ToeplitzInverse {
            x,
            logdet: logdet + nf * t0.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// log det of the original matrix.
    pub fn logdet(&self) -> T {
        self.logdet
    }

    /// First column of the inverse.
    pub fn first_column(&self) -> &[T] {
        &self.x
    }

    fn u(&self, i: usize) -> T {
        if i == 0 {
            T::zero()
        } else {
            self.x[self.x.len() - i]
        }
    }

    /// `T^-1 w` in O(n^2) without storing the inverse.
    pub fn solve(&self, w: &[T]) -> Vec<T> {
        let n = self.x.len();
        assert_eq!(w.len(), n, "toeplitz solve dimension mismatch");
        let u: Vec<T> = (0..n).map(|i| self.u(i)).collect();
        let ax = lower_t_mul(&self.x, &upper_t_mul(&self.x, w));
        let au = lower_t_mul(&u, &upper_t_mul(&u, w));
        let inv_x0 = T::one() / self.x[0];
        ax.iter().zip(&au).map(|(&a, &b)| (a - b) * inv_x0).collect()
    }

    /// First `k` columns of the inverse as an n x k matrix (Trench recurrence).
    pub fn leading_columns(&self, k: usize) -> DMatrix<T> {
        let n = self.x.len();
        let k = k.min(n);
        let x = &self.x;
        let inv_x0 = T::one() / x[0];
        let mut out = DMatrix::zeros(n, k);
        if k == 0 {
            return out;
        }
        for i in 0..n {
            out[(i, 0)] = x[i];
        }
        for j in 0..k - 1 {
            out[(0, j + 1)] = x[j + 1];
            for i in 0..n - 1 {
                let upd = (x[i + 1] * x[j + 1] - x[n - 1 - i] * x[n - 1 - j]) * inv_x0;
                out[(i + 1, j + 1)] = out[(i, j)] + upd;
            }
        }
        out
    }

    /// Sum of each superdiagonal of the inverse: `s[k] = sum_i B[i][i+k]`.
    pub fn diagonal_sums(&self) -> Vec<T> {
        let n = self.x.len();
        let x = &self.x;
        let inv_x0 = T::one() / x[0];
        let mut sums = vec![T::zero(); n];
        for (k, sum) in sums.iter_mut().enumerate() {
            let mut b = x[k];
            let mut acc = b;
            for i in 0..(n - 1 - k) {
                b += (x[i + 1] * x[i + 1 + k] - x[n - 1 - i] * x[n - 1 - i - k]) * inv_x0;
                acc += b;
            }
            *sum = acc;
        }
        sums
    }
}

/// `L(v)^T w` where `L(v)` is lower-triangular Toeplitz with first column `v`.
fn upper_t_mul<T: Scalar>(v: &[T], w: &[T]) -> Vec<T> {
    let n = v.len();
    (0..n)
        .map(|k| {
            v[..n - k]
                .iter()
                .zip(&w[k..])
                .fold(T::zero(), |a, (&vi, &wi)| a + vi * wi)
        })
        .collect()
}

/// `L(v) a`.
fn lower_t_mul<T: Scalar>(v: &[T], a: &[T]) -> Vec<T> {
    let n = v.len();
    (0..n)
        .map(|i| {
            a[..=i]
                .iter()
                .zip(v[..=i].iter().rev())
                .fold(T::zero(), |acc, (&ak, &vk)| acc + ak * vk)
        })
        .collect()
}

/// Dense symmetric Toeplitz matrix from its first row.
pub fn toeplitz_dense<T: Scalar>(first_row: &[T]) -> DMatrix<T> {
    let n = first_row.len();
    DMatrix::from_fn(n, n, |i, j| first_row[i.abs_diff(j)])
}

/// `v^T D v` for symmetric Toeplitz `D` given by its first row, in O(n^2).
pub fn toeplitz_quad_form<T: Scalar>(first_row: &[T], v: &[T]) -> T {
    let n = v.len();
    let mut acc = T::zero();
    for k in 0..n {
        let auto = v[..n - k].iter().zip(&v[k..]).fold(T::zero(), |a, (&p, &q)| a + p * q);
        acc += if k == 0 { auto } else { auto * T::lit(2.0) } * first_row[k];
    }
    acc
}

pub(crate) fn dvec<T: Scalar>(v: &[T]) -> DVector<T> {
    DVector::from_column_slice(v)
}
