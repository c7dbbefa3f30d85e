//! Dense row-major matrices and label vectors.
//!
//! Features are stored one sample per row so that per-sample work (whitening,
//! scoring, normalization) touches contiguous memory. Small `d x d` algebra
//! goes through `nalgebra` instead.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per block in block-parallel reductions.
///
/// Partial results are always combined in block order, so reductions give the
/// same bits for any worker count.
pub(crate) const BLOCK_ROWS: usize = 512;

/// Dense `n_rows x dim` matrix in row-major order with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    data: Vec<f64>,
    n_rows: usize,
    dim: usize,
}

/// Pre-logit feature matrix, one sample per row.
pub type FeatureMatrix = RowMatrix;

impl RowMatrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf and zero width.
    pub fn new(data: Vec<f64>, n_rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("feature dimension"));
        }
        if data.len() != n_rows * dim {
            return Err(Error::DimensionMismatch {
                what: "row-major buffer length",
                expected: n_rows * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { data, n_rows, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "row length",
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), dim)
    }

    /// A `0 x dim` matrix.
    pub fn empty(dim: usize) -> Self {
        Self {
            data: Vec::new(),
            n_rows: 0,
            dim,
        }
    }

    /// Skips the finiteness scan. Callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>, n_rows: usize, dim: usize) -> Self {
        debug_assert_eq!(data.len(), n_rows * dim);
        Self { data, n_rows, dim }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact cannot take a zero size; dim is always >= 1 here
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn par_rows(&self) -> impl IndexedParallelIterator<Item = &[f64]> + '_ {
        self.data.par_chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> RowMatrix {
        Self::from_vec_unchecked(
            self.data[start * self.dim..end * self.dim].to_vec(),
            end - start,
            self.dim,
        )
    }

    /// Gathers the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(data, indices.len(), self.dim)
    }

    /// Applies `f` to every row in parallel, producing rows of width `out_dim`.
    pub(crate) fn map_rows<F>(&self, out_dim: usize, f: F) -> RowMatrix
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let mut out = vec![0.0; self.n_rows * out_dim];
        if out_dim > 0 {
            out.par_chunks_exact_mut(out_dim)
                .zip(self.par_rows())
                .for_each(|(dst, src)| f(src, dst));
        }
        Self::from_vec_unchecked(out, self.n_rows, out_dim)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &RowMatrix) -> Result<RowMatrix> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                what: "vstack width",
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::from_vec_unchecked(
            data,
            self.n_rows + other.n_rows,
            self.dim,
        ))
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.par_rows().map(norm).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.dim, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(m.row(i).iter());
        }
        Self::new(data, r, c)
    }

    pub(crate) fn require_dim(&self, dim: usize, what: &'static str) -> Result<()> {
        if self.dim != dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: dim,
                found: self.dim,
            });
        }
        Ok(())
    }
}

/// Integer class labels paired row-for-row with a [`FeatureMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    values: Vec<usize>,
    n_classes: usize,
}

impl Labels {
    pub fn new(values: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Empty("class set"));
        }
        if let Some(row) = values.iter().position(|&v| v >= n_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label: values[row] as i64,
                n_classes,
            });
        }
        Ok(Self { values, n_classes })
    }

    /// Labels with `n_classes = max + 1`.
    pub fn from_values(values: Vec<usize>) -> Result<Self> {
        let n = values.iter().max().map(|m| m + 1).unwrap_or(0);
        Self::new(values, n)
    }

    /// Converts signed labels as stored in `<i8` files.
    pub fn from_i64(values: &[i64], n_classes: Option<usize>) -> Result<Self> {
        let mut out = Vec::with_capacity(values.len());
        for (row, &v) in values.iter().enumerate() {
            if v < 0 {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: v,
                    n_classes: n_classes.unwrap_or(0),
                });
            }
            out.push(v as usize);
        }
        match n_classes {
            Some(c) => Self::new(out, c),
            None => Self::from_values(out),
        }
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &v in &self.values {
            counts[v] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        Labels {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub(crate) fn require_rows(&self, rows: usize) -> Result<()> {
        if self.values.len() != rows {
            return Err(Error::DimensionMismatch {
                what: "label count vs feature rows",
                expected: rows,
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_entries() {
        let err = RowMatrix::new(vec![1.0, f64::NAN, 0.0, 1.0], 2, 2).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1 }));
        let err = RowMatrix::new(vec![1.0, 0.0, f64::INFINITY, 1.0], 2, 2).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 0 }));
    }

    #[test]
    fn rejects_ragged_rows() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(RowMatrix::from_rows(&rows).is_err());
    }

    #[test]
    fn labels_out_of_range() {
        assert!(matches!(
            Labels::new(vec![0, 3], 3),
            Err(Error::LabelOutOfRange {
                row: 1,
                label: 3,
                ..
            })
        ));
        assert!(Labels::from_i64(&[0, -1], None).is_err());
        assert_eq!(Labels::from_values(vec![0, 2]).unwrap().n_classes(), 3);
    }

    #[test]
    fn dmatrix_roundtrip_keeps_row_order() {
        let m = RowMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let d = m.to_dmatrix();
        assert_eq!(d[(0, 2)], 3.0);
        assert_eq!(d[(1, 0)], 4.0);
        assert_eq!(RowMatrix::from_dmatrix(&d).unwrap(), m);
    }
}
