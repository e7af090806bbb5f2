use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Compressed sparse row matrix. Column indices within a row are strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets that are already sorted by
    /// `(row, col)` with no duplicates.
    pub fn from_sorted_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if let Some(prev) = last {
                assert!((r, c) > prev, "triplets must be sorted and unique");
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.rows() {
            return Err(Error::Shape {
                op: "sparse_dense_matmul",
                left: (self.rows, self.cols),
                right: b.shape(),
            });
        }
        let d = b.cols();
        let mut out = Tensor::zeros(self.rows, d);
        for r in 0..self.rows {
            let orow = out.row_mut(r);
            for (c, v) in self.row(r) {
                for (o, x) in orow.iter_mut().zip(b.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, used for the adjoint of [`CsrMatrix::matmul`].
    pub fn matmul_transposed(&self, g: &Tensor) -> Result<Tensor> {
        if self.rows != g.rows() {
            return Err(Error::Shape {
                op: "sparse_transpose_matmul",
                left: (self.cols, self.rows),
                right: g.shape(),
            });
        }
        let d = g.cols();
        let mut out = Tensor::zeros(self.cols, d);
        for r in 0..self.rows {
            let grow = g.row(r);
            for (c, v) in self.row(r) {
                for (o, x) in out.row_mut(c).iter_mut().zip(grow) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    #[test]
    fn selection_row() {
        // row 0 selects row 1 of the table
        let s = CsrMatrix::from_sorted_triplets(2, 2, [(0, 1, 1.0)]);
        let table = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = s.matmul(&table).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn matches_dense_product() {
        let s = CsrMatrix::from_sorted_triplets(
            3,
            3,
            [(0, 0, 0.5), (0, 2, 0.5), (1, 1, 1.0), (2, 0, 0.25), (2, 1, 0.75)],
        );
        let b = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5], &[-3.0, 4.0]]);
        let dense = matmul(&s.to_dense(), &b).unwrap();
        assert!(s.matmul(&b).unwrap().max_abs_diff(&dense) < 1e-15);
        let g = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let dense_t = matmul(&s.to_dense().transpose(), &g).unwrap();
        assert!(s.matmul_transposed(&g).unwrap().max_abs_diff(&dense_t) < 1e-15);
    }
}
