//! Dense row-major matrices and a one-sided Jacobi SVD.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(rhs.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Sub-block `[r0..r1, c0..c1]`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Self::from_fn(r1 - r0, c1 - c0, |r, c| self[(r0 + r, c0 + c)])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("vstack of zero matrices".into()))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!(
                    "vstack column mismatch: {} vs {}",
                    p.cols, cols
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64_lossless().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// ||self - other||_F / ||other||_F, absolute when `other` is zero.
    pub fn relative_error(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossless() - b.to_f64_lossless()).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// `A = U diag(s) Vᵀ` with `U` square (rows x rows), `s` non-increasing of
/// length `min(rows, cols)` and `V` holding `min(rows, cols)` columns.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: Matrix<f64>,
}

const MAX_SWEEPS: usize = 80;

/// Full SVD computed in `f64` by one-sided (Hestenes) Jacobi rotations.
///
/// The left factor is completed to a square orthonormal basis so that every
/// leading block of it is defined even when the matrix is wide.
pub fn full_svd<T: Scalar>(a: &Matrix<T>) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::InvalidArgument("SVD of non-finite matrix".into()));
    }
    let a = a.cast::<f64>();
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!("SVD of empty {m}x{n} matrix")));
    }
    // Jacobi orthogonalizes columns; work on the orientation with fewer columns.
    let tall = m >= n;
    let work = if tall { a } else { a.transpose() };
    let (left, s, right) = jacobi_tall(&work);
    let (u_thin, v) = if tall { (left, right) } else { (right, left) };
    let p = s.len();
    let u = complete_basis(&u_thin, &s, m);
    debug_assert_eq!(v.cols(), p);
    Ok(Svd {
        u,
        singular_values: s,
        v,
    })
}

/// For tall `a` (m >= n): returns thin `U` (m x n), `s` (n), `V` (n x n),
/// sorted by non-increasing singular value.
fn jacobi_tall(a: &Matrix<f64>) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, k)] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Extends the columns of `u_thin` belonging to numerically nonzero singular
/// values to an orthonormal basis of R^m (modified Gram-Schmidt, twice).
fn complete_basis(u_thin: &Matrix<f64>, s: &[f64], m: usize) -> Matrix<f64> {
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = smax * (m.max(s.len()) as f64) * f64::EPSILON;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; m];
    for (k, &sigma) in s.iter().enumerate() {
        if sigma > tol {
            let col: Vec<f64> = (0..m).map(|i| u_thin[(i, k)]).collect();
            basis.push(col.clone());
            slots[k] = Some(col);
        }
    }
    let mut candidates = 0..m;
    for slot in slots.iter_mut() {
        if slot.is_some() {
            continue;
        }
        loop {
            let e = candidates
                .next()
                .expect("standard basis always spans the complement");
            let mut v = vec![0.0; m];
            v[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v.clone());
                *slot = Some(v);
                break;
            }
        }
    }
    let mut u = Matrix::zeros(m, m);
    for (k, col) in slots.into_iter().enumerate() {
        let col = col.expect("every slot filled");
        for i in 0..m {
            u[(i, k)] = col[i];
        }
    }
    u
}
