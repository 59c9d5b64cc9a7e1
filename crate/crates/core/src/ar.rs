//! Autoregressive model of the clean signal and its prediction-error
//! operator.
//!
//! For a block of `N` samples and order `P` the operator maps the block to
//! its `N - P` forward prediction errors, row `r` predicting sample `r + P`
//! from the `P` samples before it. No samples outside the block are assumed.
//! Under the tail the signal is treated as white noise, so coefficient
//! entries that multiply tail samples are dropped while the unit entries stay.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jitter;
use crate::partition::{partition_from_sets, SegmentPartition};
use crate::scalar::Scalar;

/// Condition number above which the normal equations get a ridge.
const RIDGE_CONDITION: f64 = 1e12;
const RIDGE_LEVEL: f64 = 1e-9;

/// AR coefficients `a_1..a_P` and innovation variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel<T> {
    pub a: Vec<T>,
    pub sigma_e2: T,
}

impl<T: Scalar> ArModel<T> {
    pub fn new(a: Vec<T>, sigma_e2: T) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Config("AR order must be at least 1".into()));
        }
        if !(sigma_e2 > T::zero()) || !sigma_e2.is_finite() {
            return Err(Error::Config(format!(
                "innovation variance must be positive, got {sigma_e2}"
            )));
        }
        if a.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite AR coefficient".into()));
        }
        Ok(ArModel { a, sigma_e2 })
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Prediction errors `x(n) - sum_i a_i x(n-i)` for `n = P..len`.
    pub fn residuals(&self, x: &[T]) -> Vec<T> {
        let p = self.order();
        (p..x.len())
            .map(|n| {
                self.a
                    .iter()
                    .enumerate()
                    .fold(x[n], |acc, (i, &ai)| acc - ai * x[n - 1 - i])
            })
            .collect()
    }
}

/// Least-squares AR fit minimizing forward prediction error over
/// `n = P..len` without pre-windowing (covariance method).
pub fn estimate_ar_covariance<T: Scalar>(samples: &[T], order: usize) -> Result<ArModel<T>> {
    let p = order;
    if p == 0 {
        return Err(Error::Config("AR order must be at least 1".into()));
    }
    if samples.len() < 2 * p + 1 {
        return Err(Error::Context(format!(
            "AR({p}) fit needs at least {} samples, got {}",
            2 * p + 1,
            samples.len()
        )));
    }
    let n = samples.len();
    let mut normal = DMatrix::<T>::zeros(p, p);
    let mut rhs = DVector::<T>::zeros(p);
    for t in p..n {
        let xt = samples[t];
        for i in 0..p {
            let xi = samples[t - 1 - i];
            rhs[i] += xt * xi;
            for j in i..p {
                normal[(i, j)] += xi * samples[t - 1 - j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            normal[(i, j)] = normal[(j, i)];
        }
    }
    let trace = normal.trace();
    if !(trace > T::zero()) {
        return Err(Error::DegenerateSignal(
            "AR normal equations are singular (signal has no energy)".into(),
        ));
    }
    let eig = SymmetricEigen::new(normal.clone()).eigenvalues;
    let lmax = eig.max();
    let lmin = eig.min();
    if !(lmin > lmax / T::lit(RIDGE_CONDITION)) {
        let ridge = T::lit(RIDGE_LEVEL) * trace / T::from_usize_lossy(p);
        log::warn!(
            "AR({p}) normal equations ill-conditioned (eig range [{:e}, {:e}]); adding ridge {:e}",
            lmin.as_f64(),
            lmax.as_f64(),
            ridge.as_f64()
        );
        for i in 0..p {
            normal[(i, i)] += ridge;
        }
    }
    let (chol, _) =
        cholesky_jitter(&normal).map_err(|_| Error::DegenerateSignal("AR normal equations are singular".into()))?;
    let a: Vec<T> = chol.solve(&rhs).iter().copied().collect();
    let model = ArModel { a, sigma_e2: T::one() };
    let res = model.residuals(samples);
    let mse = res.iter().fold(T::zero(), |acc, &e| acc + e * e) / T::from_usize_lossy(res.len());
    let energy = samples.iter().fold(T::zero(), |acc, &x| acc + x * x) / T::from_usize_lossy(n);
    // A perfectly predictable input gives zero error; keep the variance positive.
    let floor = energy * T::eps() * T::eps();
    let sigma_e2 = if mse > floor { mse } else { floor };
    ArModel::new(model.a, sigma_e2)
}

/// Dense (N-P) x N prediction-error matrix. Row `r` holds
/// `(-a_P, ..., -a_1, 1)` in columns `r..=r+P`.
pub fn build_prediction_matrix<T: Scalar>(model: &ArModel<T>, n: usize) -> Result<DMatrix<T>> {
    let p = model.order();
    if n <= p {
        return Err(Error::Dimension(format!("block length {n} must exceed AR order {p}")));
    }
    let mut a = DMatrix::zeros(n - p, n);
    for r in 0..n - p {
        a[(r, r + p)] = T::one();
        for (j, &aj) in model.a.iter().enumerate() {
            a[(r, r + p - 1 - j)] = -aj;
        }
    }
    Ok(a)
}

/// Column blocks of the prediction matrix for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedPredictor<T: Scalar> {
    pub a0: DMatrix<T>,
    pub a1: DMatrix<T>,
    pub a2: DMatrix<T>,
    pub partition: SegmentPartition,
}

impl<T: Scalar> PartitionedPredictor<T> {
    /// `[A0 A2]`, the columns multiplying the observed-or-known samples.
    pub fn known_columns(&self) -> DMatrix<T> {
        let rows = self.a0.nrows();
        let mut b = DMatrix::zeros(rows, self.a0.ncols() + self.a2.ncols());
        b.columns_mut(0, self.a0.ncols()).copy_from(&self.a0);
        b.columns_mut(self.a0.ncols(), self.a2.ncols()).copy_from(&self.a2);
        b
    }

    /// Horizontal reassembly `[A0 | A1 | A2]`.
    pub fn reassemble(&self) -> DMatrix<T> {
        let rows = self.a0.nrows();
        let (c0, c1, c2) = (self.a0.ncols(), self.a1.ncols(), self.a2.ncols());
        let mut m = DMatrix::zeros(rows, c0 + c1 + c2);
        m.columns_mut(0, c0).copy_from(&self.a0);
        m.columns_mut(c0, c1).copy_from(&self.a1);
        m.columns_mut(c0 + c1, c2).copy_from(&self.a2);
        m
    }
}

/// Splits the prediction matrix by column according to the index sets and
/// zeroes every coefficient entry in the tail columns, keeping the unit
/// entries. The AR order is recovered as `ncols - nrows`.
pub fn partition_predictor<T: Scalar>(
    matrix: &DMatrix<T>,
    i0: &[usize],
    i1: &[usize],
    i2: &[usize],
) -> Result<PartitionedPredictor<T>> {
    let n = matrix.ncols();
    if matrix.nrows() >= n {
        return Err(Error::Dimension(format!(
            "prediction matrix must be wide, got {}x{n}",
            matrix.nrows()
        )));
    }
    let part = partition_from_sets(i0, i1, i2, n)?;
    Ok(split_predictor(matrix, part))
}

pub(crate) fn split_predictor<T: Scalar>(matrix: &DMatrix<T>, part: SegmentPartition) -> PartitionedPredictor<T> {
    let n = matrix.ncols();
    let p = n - matrix.nrows();
    let a0 = matrix.columns(0, part.n0).into_owned();
    let a1 = matrix.columns(part.n0, part.m).into_owned();
    let mut a2 = matrix.columns(part.tail_start(), part.tail_len()).into_owned();
    for (j, c) in part.i2().enumerate() {
        for r in 0..a2.nrows() {
            if r + p != c {
                a2[(r, j)] = T::zero();
            }
        }
    }
    PartitionedPredictor {
        a0,
        a1,
        a2,
        partition: part,
    }
}

/// Convenience: build and partition in one step.
pub fn partitioned_predictor<T: Scalar>(model: &ArModel<T>, part: SegmentPartition) -> Result<PartitionedPredictor<T>> {
    let a = build_prediction_matrix(model, part.n)?;
    Ok(split_predictor(&a, part))
}

/// Matrix-free view of the partitioned predictor for one block.
///
/// Every product touches at most `P + 1` entries per row or column, so all
/// operations are O(N P) or cheaper.
#[derive(Debug, Clone, Copy)]
pub struct BandedPredictor<'a, T> {
    a: &'a [T],
    part: SegmentPartition,
}

impl<'a, T: Scalar> BandedPredictor<'a, T> {
    pub fn new(model: &'a ArModel<T>, part: SegmentPartition) -> Result<Self> {
        if part.n <= model.order() {
            return Err(Error::Dimension(format!(
                "block length {} must exceed AR order {}",
                part.n,
                model.order()
            )));
        }
        Ok(BandedPredictor { a: &model.a, part })
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    pub fn rows(&self) -> usize {
        self.part.n - self.order()
    }

    pub fn partition(&self) -> SegmentPartition {
        self.part
    }

    /// `A0 x0 + A1 x1 + A2 x2` for a full block `x`.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let p = self.order();
        let tail = self.part.tail_start();
        (0..self.rows())
            .map(|r| {
                let t = r + p;
                let mut acc = x[t];
                for (j, &aj) in self.a.iter().enumerate() {
                    let c = t - 1 - j;
                    if c < tail {
                        acc -= aj * x[c];
                    }
                }
                acc
            })
            .collect()
    }

    /// Sparse column `c` of the (zeroed) operator as `(row, value)` pairs.
    pub fn column(&self, c: usize) -> Vec<(usize, T)> {
        let p = self.order();
        let rows = self.rows();
        let mut out = Vec::with_capacity(p + 1);
        if c >= p && c - p < rows {
            out.push((c - p, T::one()));
        }
        if c < self.part.tail_start() {
            for (j, &aj) in self.a.iter().enumerate() {
                let t = c + 1 + j;
                if t >= p && t - p < rows {
                    out.push((t - p, -aj));
                }
            }
        }
        out
    }

    /// `A1^T r`.
    pub fn a1_transpose_apply(&self, r: &[T]) -> Vec<T> {
        self.part
            .i1()
            .map(|c| {
                self.column(c)
                    .into_iter()
                    .fold(T::zero(), |acc, (row, v)| acc + v * r[row])
            })
            .collect()
    }

    /// Adds `A1 x1` into `r`.
    pub fn a1_apply_into(&self, x1: &[T], r: &mut [T]) {
        for (k, c) in self.part.i1().enumerate() {
            for (row, v) in self.column(c) {
                r[row] += v * x1[k];
            }
        }
    }

    /// `A1^T A1` (M x M).
    pub fn a1_gram(&self) -> DMatrix<T> {
        let cols: Vec<Vec<(usize, T)>> = self.part.i1().map(|c| self.column(c)).collect();
        let m = cols.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = sparse_dot(&cols[i], &cols[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Dense rows `[lo, hi)` of A1, used by the tail solver.
    pub fn a1_rows(&self, lo: usize, hi: usize) -> DMatrix<T> {
        let mut out = DMatrix::zeros(hi - lo, self.part.m);
        for (k, c) in self.part.i1().enumerate() {
            for (row, v) in self.column(c) {
                if row >= lo && row < hi {
                    out[(row - lo, k)] = v;
                }
            }
        }
        out
    }
}

fn sparse_dot<T: Scalar>(a: &[(usize, T)], b: &[(usize, T)]) -> T {
    let mut acc = T::zero();
    for &(ra, va) in a {
        for &(rb, vb) in b {
            if ra == rb {
                acc += va * vb;
            }
        }
    }
    acc
}
