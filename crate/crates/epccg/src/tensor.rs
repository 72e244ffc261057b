//! Minimal row-major 2-D tensor used by the transformer. Shapes here are
//! tiny (desk scale), so plain loops beat any BLAS dependency.

use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Tensor<F> {
        Tensor { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor<F> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| F::from_f64(x)));
        }
        Tensor { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (r x k) * other (k x c).
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
        out
    }

    /// self (r x k) * other^T where other is (c x k).
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let dot = a_row
                    .iter()
                    .zip(other.row(j))
                    .map(|(&a, &b)| a * b)
                    .sum();
                *out.at_mut(i, j) = dot;
            }
        }
        out
    }

    /// self^T * other where self is (k x r) and other is (k x c).
    pub fn matmul_tn(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a_ki) in a_row.iter().enumerate() {
                let out_row = out.row_mut(i);
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ki * b_kj;
                }
            }
        }
        out
    }

    /// Adds a 1 x cols bias tensor to every row.
    pub fn add_bias(&mut self, bias: &Tensor<F>) {
        assert_eq!(bias.cols, self.cols);
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// Copies `width` columns starting at `start` into a new tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor<F> {
        assert!(start + width <= self.cols);
        let mut out = Tensor::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Accumulates `block` into columns [start, start+block.cols).
    pub fn add_into_cols(&mut self, start: usize, block: &Tensor<F>) {
        assert_eq!(self.rows, block.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + block.cols];
            for (d, &s) in dst.iter_mut().zip(block.row(r)) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
