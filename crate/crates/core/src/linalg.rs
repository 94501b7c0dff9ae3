//! Small dense matrices over any [`Real`] scalar and Gaussian log-densities.
//!
//! State dimensions in this crate are at most a few dozen, so plain row-major
//! storage with naive loops is adequate.

use crate::autodiff::Real;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::cst(1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn from_f64(m: &Mat<f64>) -> Self {
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| T::cst(v)).collect(),
        }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                let mut acc = row[0] * x[0];
                for j in 1..self.cols {
                    acc += row[j] * x[j];
                }
                acc
            })
            .collect()
    }

    pub fn values(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }

    /// `self * selfᵀ`.
    pub fn outer_self(&self) -> Mat<T> {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc += self.at(i, k) * self.at(j, k);
                }
                out.set(i, j, acc);
                out.set(j, i, acc);
            }
        }
        out
    }

    /// Lower Cholesky factor, `None` when the matrix is not positive definite.
    pub fn cholesky(&self) -> Option<Mat<T>> {
        assert_eq!(self.rows, self.cols, "cholesky of non-square matrix");
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self.at(j, j);
            for k in 0..j {
                d -= l.at(j, k).square();
            }
            if !(d.value() > 0.0) {
                return None;
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let mut s = self.at(i, j);
                for k in 0..j {
                    s -= l.at(i, k) * l.at(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Some(l)
    }
}

impl Mat<f64> {
    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Mat {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

/// Solves `L z = r` for lower-triangular `L`.
pub fn forward_substitute<T: Real>(l: &Mat<T>, r: &[T]) -> Vec<T> {
    let n = r.len();
    let mut z: Vec<T> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = r[i];
        for (k, zk) in z.iter().enumerate() {
            s -= l.at(i, k) * *zk;
        }
        z.push(s / l.at(i, i));
    }
    z
}

/// `log N(x; mean, diag(var))`.
pub fn diag_normal_logpdf<T: Real>(x: &[T], mean: &[T], var: &[T]) -> T {
    let mut acc = T::cst(-0.5 * LN_2PI * x.len() as f64);
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        acc -= (var[i].ln() + r.square() / var[i]) * 0.5;
    }
    acc
}

/// `log N(x; mean, diag(exp(log_sd))²)`.
pub fn diag_normal_logpdf_log_sd<T: Real>(x: &[T], mean: &[T], log_sd: &[T]) -> T {
    let mut acc = T::cst(-0.5 * LN_2PI * x.len() as f64);
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) * (-log_sd[i]).exp();
        acc -= log_sd[i] + z.square() * 0.5;
    }
    acc
}

/// `log N(x; mean, L Lᵀ)` given the lower Cholesky factor `L`.
pub fn chol_normal_logpdf<T: Real>(x: &[T], mean: &[T], chol: &Mat<T>) -> T {
    let r: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let z = forward_substitute(chol, &r);
    let mut acc = T::cst(-0.5 * LN_2PI * x.len() as f64);
    for (i, zi) in z.iter().enumerate() {
        acc -= chol.at(i, i).ln() + zi.square() * 0.5;
    }
    acc
}

/// Dense multivariate normal log-density for `f64` inputs.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &Mat<f64>) -> Option<f64> {
    let l = cov.cholesky()?;
    Some(chol_normal_logpdf(x, mean, &l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_reconstructs() {
        let a = Mat::from_vec(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let l = a.cholesky().unwrap();
        let back = l.outer_self();
        for (x, y) in back.data.iter().zip(&a.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        assert!(Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).cholesky().is_none());
    }

    #[test]
    fn dense_and_diagonal_densities_agree() {
        let x = [0.3, -1.2];
        let m = [0.1, 0.4];
        let var = [2.0, 0.5];
        let dense = mvn_logpdf(&x, &m, &Mat::diag(&var)).unwrap();
        let diag = diag_normal_logpdf(&x, &m, &var);
        let log_sd: Vec<f64> = var.iter().map(|v: &f64| 0.5 * v.ln()).collect();
        let diag2 = diag_normal_logpdf_log_sd(&x, &m, &log_sd);
        assert_relative_eq!(dense, diag, epsilon = 1e-12);
        assert_relative_eq!(dense, diag2, epsilon = 1e-12);
    }
}
