use std::sync::Arc;

use super::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed-row index structure shared between matrices with the same support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from coordinates. Coordinates may arrive in any order but
    /// must be unique and in bounds. Returns the pattern together with the
    /// position each input coordinate landed at.
    pub fn from_coords(rows: usize, cols: usize, coords: &[(usize, usize)]) -> Result<(Self, Vec<usize>)> {
        let mut order: Vec<usize> = (0..coords.len()).collect();
        for &(r, c) in coords {
            if r >= rows {
                return Err(Error::Index {
                    op: "sparse row",
                    index: r,
                    limit: rows,
                });
            }
            if c >= cols {
                return Err(Error::Index {
                    op: "sparse col",
                    index: c,
                    limit: cols,
                });
            }
        }
        order.sort_by_key(|&t| coords[t]);
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(coords.len());
        let mut position = vec![0; coords.len()];
        for (slot, &t) in order.iter().enumerate() {
            let (r, c) = coords[t];
            if slot > 0 && coords[order[slot - 1]] == (r, c) {
                return Err(Error::invalid(format!("duplicate sparse entry ({r}, {c})")));
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            position[t] = slot;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok((
            Self {
                rows,
                cols,
                row_ptr,
                col_idx,
            },
            position,
        ))
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    #[inline]
    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.row_ptr[r + 1] - self.row_ptr[r]));
        }
        out
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.row_indices().into_iter().zip(self.col_idx.iter().copied()).collect()
    }

    /// Storage position of `(r, c)`, if present.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        self.col_idx[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| range.start + k)
    }

    /// Position of the transposed entry for every stored entry; `None` where the
    /// mirror entry is absent.
    pub fn mirror_positions(&self) -> Vec<Option<usize>> {
        self.coords().into_iter().map(|(r, c)| {
            if c < self.rows && r < self.cols {
                self.find(c, r)
            } else {
                None
            }
        }).collect()
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        self.rows == self.cols && self.mirror_positions().iter().all(Option::is_some)
    }
}

/// Compressed-row real matrix. The pattern is shared and immutable; only
/// values vary between matrices built on the same support.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::invalid(format!(
                "pattern has {} entries, got {} values",
                pattern.nnz(),
                values.len()
            )));
        }
        Ok(Self { pattern, values })
    }

    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let coords: Vec<_> = triplets.iter().map(|&(r, c, _)| (r, c)).collect();
        let (pattern, position) = SparsePattern::from_coords(rows, cols, &coords)?;
        let mut values = vec![0.0; triplets.len()];
        for (t, &(_, _, v)) in triplets.iter().enumerate() {
            values[position[t]] = v;
        }
        Ok(Self {
            pattern: Arc::new(pattern),
            values,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            pattern: Arc::new(SparsePattern::empty(rows, cols)),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            pattern: Arc::new(SparsePattern {
                rows: n,
                cols: n,
                row_ptr: (0..=n).collect(),
                col_idx: (0..n).collect(),
            }),
            values: vec![1.0; n],
        }
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(d: &DenseMatrix) -> Self {
        Self::from_dense_filtered(d, |v| v != 0.0)
    }

    /// Keeps every entry of a dense matrix, zeros included.
    pub fn from_dense_full(d: &DenseMatrix) -> Self {
        Self::from_dense_filtered(d, |_| true)
    }

    fn from_dense_filtered(d: &DenseMatrix, keep: impl Fn(f64) -> bool) -> Self {
        let mut row_ptr = Vec::with_capacity(d.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..d.rows() {
            for (c, &v) in d.row(r).iter().enumerate() {
                if keep(v) {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            pattern: Arc::new(SparsePattern {
                rows: d.rows(),
                cols: d.cols(),
                row_ptr,
                col_idx,
            }),
            values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.pattern.rows, self.pattern.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.pattern.clone(), values)
    }

    /// Stored value at `(r, c)`, zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.find(r, c).map_or(0.0, |k| self.values[k])
    }

    /// `(row, col, value)` for every stored entry, row-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.pattern
            .coords()
            .into_iter()
            .zip(&self.values)
            .map(|((r, c), &v)| (r, c, v))
            .collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows(), self.cols());
        for (r, c, v) in self.triplets() {
            d.set(r, c, v);
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        SparseMatrix::from_triplets(self.cols(), self.rows(), &t).expect("transpose keeps entries unique")
    }

    /// Exact symmetry check on stored values.
    pub fn is_symmetric(&self) -> bool {
        if self.rows() != self.cols() {
            return false;
        }
        self.pattern
            .mirror_positions()
            .iter()
            .zip(&self.values)
            .all(|(m, &v)| m.is_some_and(|k| self.values[k] == v))
    }

    /// `self · d`, touching only stored entries.
    pub fn matmul_dense(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols() != d.rows() {
            return Err(Error::shape("sparse_dense_matmul", self.shape(), d.shape()));
        }
        let p = d.cols();
        let mut out = DenseMatrix::zeros(self.rows(), p);
        let cols = self.pattern.col_indices();
        for r in 0..self.rows() {
            let out_row = out.row_mut(r);
            for k in self.pattern.row_range(r) {
                let v = self.values[k];
                for (o, &x) in out_row.iter_mut().zip(d.row(cols[k])) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · d` without building the transpose.
    pub fn t_matmul_dense(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows() != d.rows() {
            return Err(Error::shape("sparse_t_dense_matmul", self.shape(), d.shape()));
        }
        let p = d.cols();
        let mut out = DenseMatrix::zeros(self.cols(), p);
        let cols = self.pattern.col_indices();
        for r in 0..self.rows() {
            let d_row = d.row(r);
            for k in self.pattern.row_range(r) {
                let v = self.values[k];
                for (o, &x) in out.row_mut(cols[k]).iter_mut().zip(d_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Entrywise sum over the union of both supports. Also returns, for each
    /// input, where its entries landed in the output.
    pub fn union_add(&self, other: &SparseMatrix) -> Result<(SparseMatrix, Vec<usize>, Vec<usize>)> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sparse add", self.shape(), other.shape()));
        }
        let (rows, cols) = self.shape();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        let mut map_a = vec![0; self.nnz()];
        let mut map_b = vec![0; other.nnz()];
        let (ca, cb) = (self.pattern.col_indices(), other.pattern.col_indices());
        row_ptr.push(0);
        for r in 0..rows {
            let (mut i, ie) = (self.pattern.row_ptr[r], self.pattern.row_ptr[r + 1]);
            let (mut j, je) = (other.pattern.row_ptr[r], other.pattern.row_ptr[r + 1]);
            while i < ie || j < je {
                let slot = col_idx.len();
                if j >= je || (i < ie && ca[i] < cb[j]) {
                    col_idx.push(ca[i]);
                    values.push(self.values[i]);
                    map_a[i] = slot;
                    i += 1;
                } else if i >= ie || cb[j] < ca[i] {
                    col_idx.push(cb[j]);
                    values.push(other.values[j]);
                    map_b[j] = slot;
                    j += 1;
                } else {
                    col_idx.push(ca[i]);
                    values.push(self.values[i] + other.values[j]);
                    map_a[i] = slot;
                    map_b[j] = slot;
                    i += 1;
                    j += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        let pattern = Arc::new(SparsePattern {
            rows,
            cols,
            row_ptr,
            col_idx,
        });
        Ok((SparseMatrix { pattern, values }, map_a, map_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_times_dense_is_zero() {
        let s = SparseMatrix::empty(3, 2);
        let d = DenseMatrix::filled(2, 4, 1.5);
        assert_eq!(s.matmul_dense(&d).unwrap(), DenseMatrix::zeros(3, 4));
    }

    #[test]
    fn identity_is_neutral() {
        let d = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
        assert_eq!(SparseMatrix::identity(2).matmul_dense(&d).unwrap(), d);
    }

    #[test]
    fn duplicates_rejected() {
        let err = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn union_add_counts_disjoint_supports() {
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let b = SparseMatrix::from_triplets(3, 3, &[(2, 2, 4.0), (0, 1, 2.0)]).unwrap();
        let (sum, map_a, map_b) = a.union_add(&b).unwrap();
        assert_eq!(sum.nnz(), 3);
        assert_eq!(sum.get(0, 1), 3.0);
        assert_eq!(map_a[0], map_b[0]);
        assert_eq!(sum.to_dense(), a.to_dense().add(&b.to_dense()).unwrap());
    }

    #[test]
    fn transposed_product_matches_dense() {
        let s = SparseMatrix::from_triplets(2, 3, &[(0, 2, 2.0), (1, 0, -1.0), (1, 1, 0.5)]).unwrap();
        let d = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let want = s.to_dense().t_matmul(&d).unwrap();
        assert_eq!(s.t_matmul_dense(&d).unwrap(), want);
    }

    #[test]
    fn symmetry_check_compares_values() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(s.is_symmetric());
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 2.0)]).unwrap();
        assert!(!s.is_symmetric());
    }
}
