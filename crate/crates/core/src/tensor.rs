//! Dense row-major matrices with the handful of kernels the model needs.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `start..start + count` into a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Self {
        Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts along the row dimension.
    pub fn vstack(parts: &[&Matrix<T>]) -> Self {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
        }
        Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// `self += alpha * other`, computed in f64.
    pub fn add_scaled(&mut self, other: &Matrix<T>, alpha: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = T::narrow(a.widen() + alpha * b.widen());
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a = T::narrow(a.widen() * alpha);
        }
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix<T>) {
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a = *a + *b;
            }
        }
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix<T> {
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (s, v) in acc.iter_mut().zip(self.row(r)) {
                *s += v.widen();
            }
        }
        Matrix::from_vec(1, self.cols, acc.into_iter().map(T::narrow).collect())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let mut acc = vec![0.0f64; rhs.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (k, a) in self.row(r).iter().enumerate() {
                let a = a.widen();
                if a == 0.0 {
                    continue;
                }
                for (s, b) in acc.iter_mut().zip(rhs.row(k)) {
                    *s += a * b.widen();
                }
            }
            for (o, s) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = T::narrow(*s);
            }
        }
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_bt(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_bt inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..rhs.rows {
                out.set(r, c, T::narrow(dot(a, rhs.row(c))));
            }
        }
        out
    }

    /// `self^T * rhs`.
    pub fn matmul_at(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, rhs.rows, "matmul_at inner dimension mismatch");
        let mut acc = vec![0.0f64; self.cols * rhs.cols];
        for r in 0..self.rows {
            let b = rhs.row(r);
            for (k, a) in self.row(r).iter().enumerate() {
                let a = a.widen();
                if a == 0.0 {
                    continue;
                }
                let dst = &mut acc[k * rhs.cols..(k + 1) * rhs.cols];
                for (s, bv) in dst.iter_mut().zip(b) {
                    *s += a * bv.widen();
                }
            }
        }
        Matrix::from_vec(
            self.cols,
            rhs.cols,
            acc.into_iter().map(T::narrow).collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.widen().abs())
            .fold(0.0, f64::max)
    }

    /// Converts element-wise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

/// Numerically stable log-softmax of a row, in f64. Entries equal to
/// `-inf` stay `-inf`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![f64::NEG_INFINITY; row.len()];
    }
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let b = m(3, 2, &[0.5, -2.0, 1.0, 1.0, 2.0, 0.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[8.5, 0.0, 8.0, 2.5]);

        let bt = Matrix::from_fn(2, 3, |r, c| b.get(c, r));
        assert_eq!(a.matmul_bt(&bt), ab);

        let at = Matrix::from_fn(3, 2, |r, c| a.get(c, r));
        assert_eq!(at.matmul_at(&b), ab);
    }

    #[test]
    fn log_softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, 3.0, f64::NEG_INFINITY]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn vstack_and_slice_round_trip() {
        let a = m(1, 2, &[1.0, 2.0]);
        let b = m(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let s = Matrix::vstack(&[&a, &b]);
        assert_eq!(s.rows(), 3);
        assert_eq!(s.slice_rows(1, 2), b);
    }
}
