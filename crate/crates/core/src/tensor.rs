//! Dense row-major matrices and the handful of kernels the transformer needs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type. Training runs in `f32`; gradient checks in
/// `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

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

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }
}

/// `out += a · b` for `a: n×k`, `b: k×m`.
pub fn matmul_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    assert_eq!(out.shape(), (a.rows, b.cols), "matmul output shape");
    let m = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(b.row(p)) {
                *o = *o + aip * bpj;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

/// `out += a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_bt_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    assert_eq!(out.shape(), (a.rows, b.rows), "matmul_bt output shape");
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            let dot: T = ai.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            let o = &mut out.data[i * b.rows + j];
            *o = *o + dot;
        }
    }
}

pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.rows);
    matmul_bt_acc(a, b, &mut out);
    out
}

/// `out += aᵀ · b` for `a: k×n`, `b: k×m`.
pub fn matmul_at_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!(out.shape(), (a.cols, b.cols), "matmul_at output shape");
    let m = b.cols;
    for p in 0..a.rows {
        let brow = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, &bpj) in out_row.iter_mut().zip(brow) {
                *o = *o + api * bpj;
            }
        }
    }
}

/// Numerically stable `log(softmax(row))`.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|&x| x - log_z).collect()
}

pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    log_softmax(row).into_iter().map(T::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = m(3, 2, &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).as_slice(), &[58., 64., 139., 154.]);

        let bt = m(2, 3, &[7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul_bt(&a, &bt), matmul(&a, &b));

        let at = m(3, 2, &[1., 4., 2., 5., 3., 6.]);
        let mut out = Matrix::zeros(2, 2);
        matmul_at_acc(&at, &b, &mut out);
        assert_eq!(out, matmul(&a, &b));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0f64, 1001.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0]);
        let lp = log_softmax(&[0.0f64; 4]);
        assert!((lp[0] + 4f64.ln()).abs() < 1e-12);
    }
}
