//! The three-way split of a processing block into pre-pulse samples,
//! the initial discontinuity, and the tail.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Block of `n` samples split at `n0` (discontinuity start) and `n0 + m`
/// (tail start). Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentPartition {
    pub n0: usize,
    pub m: usize,
    pub n: usize,
}

impl SegmentPartition {
    pub fn new(n0: usize, m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Partition("discontinuity length must be >= 1".into()));
        }
        if n0 + m > n {
            return Err(Error::Partition(format!(
                "discontinuity [{n0}, {}) exceeds block length {n}",
                n0 + m
            )));
        }
        Ok(SegmentPartition { n0, m, n })
    }

    /// Partition without a discontinuity; everything before `n0` is clean and
    /// the rest is tail.
    pub fn without_discontinuity(n0: usize, n: usize) -> Result<Self> {
        if n0 > n {
            return Err(Error::Partition(format!("n0 {n0} beyond block {n}")));
        }
        Ok(SegmentPartition { n0, m: 0, n })
    }

    pub fn i0(&self) -> Range<usize> {
        0..self.n0
    }

    pub fn i1(&self) -> Range<usize> {
        self.n0..self.n0 + self.m
    }

    pub fn i2(&self) -> Range<usize> {
        self.tail_start()..self.n
    }

    pub fn tail_start(&self) -> usize {
        self.n0 + self.m
    }

    pub fn tail_len(&self) -> usize {
        self.n - self.tail_start()
    }

    /// Columns of the n x n identity selected by i0, i1, i2 (K, U1, U2).
    pub fn selectors<T: Scalar>(&self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let sel = |r: Range<usize>| {
            let mut s = DMatrix::zeros(self.n, r.len());
            for (j, i) in r.enumerate() {
                s[(i, j)] = T::one();
            }
            s
        };
        (sel(self.i0()), sel(self.i1()), sel(self.i2()))
    }

    /// Splits a block into (y0, y1, y2).
    pub fn split<'a, T>(&self, y: &'a [T]) -> (&'a [T], &'a [T], &'a [T]) {
        assert_eq!(y.len(), self.n, "block length does not match partition");
        (&y[self.i0()], &y[self.i1()], &y[self.i2()])
    }
}

/// Checks that three index lists are contiguous, ordered, disjoint and cover
/// `0..n`, returning the equivalent partition.
pub fn partition_from_sets(i0: &[usize], i1: &[usize], i2: &[usize], n: usize) -> Result<SegmentPartition> {
    if i0.len() + i1.len() + i2.len() != n {
        return Err(Error::Partition(format!(
            "index sets have {} entries in total, block has {n}",
            i0.len() + i1.len() + i2.len()
        )));
    }
    let expected = 0..n;
    let all = i0.iter().chain(i1).chain(i2).copied();
    if !all.eq(expected) {
        return Err(Error::Partition(
            "index sets must be contiguous, ordered and disjoint".into(),
        ));
    }
    Ok(SegmentPartition {
        n0: i0.len(),
        m: i1.len(),
        n,
    })
}
