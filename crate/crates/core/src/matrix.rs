//! Dense row-major f64 matrices and the handful of kernels the training
//! loop spends its time in.

use serde::{Deserialize, Serialize};

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Per-column sums over rows.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Per-column mean over rows.
    pub fn col_means(&self) -> Vec<f64> {
        let mut out = self.col_sums();
        let n = self.rows as f64;
        for o in &mut out {
            *o /= n;
        }
        out
    }

    /// Per-column population standard deviation, with `epsilon` added to the
    /// variance before the square root.
    pub fn col_stds(&self, epsilon: f64) -> Vec<f64> {
        let means = self.col_means();
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((o, &v), &m) in out.iter_mut().zip(self.row(i)).zip(&means) {
                let d = v - m;
                *o += d * d;
            }
        }
        let n = self.rows as f64;
        for o in &mut out {
            *o = (*o / n + epsilon).sqrt();
        }
        out
    }
}

/// `c += a * b` for row-major `a` (m x k), `b` (k x n), `c` (m x n).
///
/// Uses fused multiply-add in a fixed accumulation order (k ascending within
/// each output row), so results are bit-reproducible run to run.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    // Two output rows and four k-steps per pass: each loaded b row feeds
    // eight fused multiply-adds, so the loop is compute bound rather than
    // load bound.
    while i + 2 <= m {
        let (ar0, ar1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
        let (cr0, cr1) = c[i * n..(i + 2) * n].split_at_mut(n);
        let mut p = 0;
        while p + 4 <= k {
            let (x0, x1, x2, x3) = (ar0[p], ar0[p + 1], ar0[p + 2], ar0[p + 3]);
            let (y0, y1, y2, y3) = (ar1[p], ar1[p + 1], ar1[p + 2], ar1[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for (((((cu, cv), &v0), &v1), &v2), &v3) in
                cr0.iter_mut().zip(cr1.iter_mut()).zip(b0).zip(b1).zip(b2).zip(b3)
            {
                let mut u = x0.mul_add(v0, *cu);
                let mut v = y0.mul_add(v0, *cv);
                u = x1.mul_add(v1, u);
                v = y1.mul_add(v1, v);
                u = x2.mul_add(v2, u);
                v = y2.mul_add(v2, v);
                *cu = x3.mul_add(v3, u);
                *cv = y3.mul_add(v3, v);
            }
            p += 4;
        }
        while p < k {
            let (x, y) = (ar0[p], ar1[p]);
            let brow = &b[p * n..(p + 1) * n];
            for ((cu, cv), &bv) in cr0.iter_mut().zip(cr1.iter_mut()).zip(brow) {
                *cu = x.mul_add(bv, *cu);
                *cv = y.mul_add(bv, *cv);
            }
            p += 1;
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = aip.mul_add(bv, *cv);
            }
        }
    }
}

/// `a * b` into a fresh matrix.
pub(crate) fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimensions must agree");
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_acc(a.rows, a.cols, b.cols, &a.data, &b.data, &mut c.data);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.transposed().transposed(), a);
        assert_eq!(a.transposed().get(2, 1), 6.0);
    }

    #[test]
    fn col_stats() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(a.col_means(), vec![1.0, 2.0]);
        assert_eq!(a.col_stds(0.0), vec![1.0, 1.0]);
    }
}
