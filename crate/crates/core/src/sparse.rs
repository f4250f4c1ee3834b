//! Minimal compressed-sparse-row matrix for the aggregation operators and
//! sparse constraint blocks.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("entry exists") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `out += alpha * Aᵀ x`
    pub fn tr_mul_vec_acc(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += alpha * v * xr;
            }
        }
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        self.tr_mul_vec_acc(1.0, x, &mut out);
        out
    }

    /// Row-wise product with a dense matrix: returns `A · X` for `X` of shape ncols×k.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for (col, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
            let col = col.as_slice();
            for (r, d) in dst.iter_mut().enumerate() {
                *d = self.row(r).map(|(c, v)| v * col[c]).sum();
            }
        }
        out
    }

    /// `out += alpha * Aᵀ X` for `X` of shape nrows×k.
    pub fn tr_mul_dense_acc(&self, alpha: f64, x: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        debug_assert_eq!(x.nrows(), self.nrows);
        debug_assert_eq!(out.nrows(), self.ncols);
        for (col, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
            let dst = dst.as_mut_slice();
            for (r, xr) in col.iter().enumerate() {
                if *xr == 0.0 {
                    continue;
                }
                for (c, v) in self.row(r) {
                    dst[c] += alpha * v * xr;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// Row `r` multiplied by `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> CsrMatrix {
        assert_eq!(factors.len(), self.nrows, "one factor per row");
        let mut out = self.clone();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut out.values[self.indptr[r]..self.indptr[r + 1]] {
                *v *= f;
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let triplets: Vec<(usize, usize, f64)> = (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_multiply() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, 2.0), (0, 0, 0.5), (1, 0, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]), vec![1.5, 5.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 1.0]), vec![0.5, 0.0, 2.0]);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn dense_products_match_vector_products() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 1, 3.0), (1, 2, -2.0), (1, 0, 1.0)]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 4.0]);
        let ax = m.mul_dense(&x);
        assert_eq!(ax, m.to_dense() * &x);
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut out = DMatrix::zeros(3, 2);
        m.tr_mul_dense_acc(2.0, &y, &mut out);
        assert_eq!(out, m.to_dense().transpose() * &y * 2.0);
    }
}
