//! Dense linear algebra: row-major matrices, vectors, and the three classical
//! reference solvers (LU with partial pivoting, Householder QR least squares,
//! truncated-SVD least squares via one-sided Jacobi).

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivot threshold relative to the infinity norm of the matrix.
pub const PIVOT_TOLERANCE: f64 = 1e-14;
/// Rank threshold on `|R_ii|` relative to the Frobenius norm of the matrix.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// Maximum number of Jacobi sweeps before giving up.
pub const MAX_JACOBI_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("singular matrix: pivot {pivot:e} at step {step} below threshold {threshold:e}")]
    SingularMatrix { step: usize, pivot: f64, threshold: f64 },
    #[error("rank deficient: |R[{index},{index}]| = {value:e} below threshold {threshold:e}")]
    RankDeficient { index: usize, value: f64, threshold: f64 },
    #[error("jacobi svd did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense vector of doubles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Vector(data.to_vec())
    }

    /// Rejects NaN and infinite entries.
    pub fn try_finite(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Vector(data))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|v| c * v).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm with scaling to avoid overflow/underflow.
pub fn norm2(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

/// Row-major dense matrix of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        DenseMatrix { rows: r, cols: c, data: rows.concat() }
    }

    pub fn hilbert(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| 1.0 / (i + j + 1) as f64)
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(Vector((0..self.rows).map(|i| dot(self.row(i), x)).collect()))
    }

    /// `Aᵀ y` without forming the transpose.
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vector> {
        if self.rows != y.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Ok(Vector(out))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| c * v).collect() }
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch("matrix subtraction".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    /// Sub-matrix with the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with rows permuted so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> DenseMatrix {
        Self::from_fn(self.rows, self.cols, |i, j| self[(perm[i], j)])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting, `P A = L U` stored in place.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl LuFactorization {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let threshold = PIVOT_TOLERANCE * a.norm_inf();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            // First maximal element wins ties.
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best >= threshold) || best == 0.0 {
                return Err(LinalgError::SingularMatrix { step: k, pivot: best, threshold });
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor == 0.0 {
                    continue;
                }
                let (upper, lower) = lu.data.split_at_mut(i * n);
                let row_k = &upper[k * n + k + 1..k * n + n];
                let row_i = &mut lower[k + 1..n];
                for (x, u) in row_i.iter_mut().zip(row_k) {
                    *x -= factor * u;
                }
            }
        }
        Ok(LuFactorization { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    /// Row permutation applied during elimination.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vector> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "rhs of length {} for {n}x{n} system",
                b.len()
            )));
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s = dot(&row[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / row[i];
        }
        Ok(Vector(x))
    }
}

/// Solves the square system `A x = b` by LU with partial pivoting.
pub fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vector> {
    if a.is_square() && a.rows != b.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} system with rhs of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    LuFactorization::factor(a)?.solve(b)
}

/// Least-squares solution of `min ‖Ax − b‖₂` via Householder QR.
pub fn qr_least_squares(a: &DenseMatrix, b: &[f64]) -> Result<Vector> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::InvalidArgument(format!(
            "qr least squares needs rows >= cols, got {m}x{n}"
        )));
    }
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch(format!("{m}x{n} system with rhs of length {}", b.len())));
    }
    let threshold = RANK_TOLERANCE * a.norm_fro();
    let mut r = a.clone();
    let mut qtb = b.to_vec();
    let mut v = vec![0.0; m];
    for k in 0..n {
        let col: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm2(&col);
        if alpha == 0.0 {
            return Err(LinalgError::RankDeficient { index: k, value: 0.0, threshold });
        }
        let sign = if col[0] >= 0.0 { 1.0 } else { -1.0 };
        // v = x + sign(x0)‖x‖ e1, normalized
        for (vi, ci) in v[k..].iter_mut().zip(&col) {
            *vi = *ci;
        }
        v[k] += sign * alpha;
        let vnorm = norm2(&v[k..m]);
        for vi in v[k..m].iter_mut() {
            *vi /= vnorm;
        }
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i] * s;
            }
        }
        let s: f64 = (k..m).map(|i| v[i] * qtb[i]).sum();
        for i in k..m {
            qtb[i] -= 2.0 * v[i] * s;
        }
    }
    for k in 0..n {
        let value = r[(k, k)].abs();
        if value < threshold {
            return Err(LinalgError::RankDeficient { index: k, value, threshold });
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| r[(i, j)] * x[j]).sum();
        x[i] = (qtb[i] - s) / r[(i, i)];
    }
    Ok(Vector(x))
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × k` with orthonormal columns, `k = min(m, n)`.
    pub u: DenseMatrix,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// `n × k` with orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, k) = self.u.shape();
        let n = self.v.rows();
        DenseMatrix::from_fn(m, n, |i, j| {
            (0..k).map(|l| self.u[(i, l)] * self.singular_values[l] * self.v[(j, l)]).sum()
        })
    }
}

/// One-sided Jacobi SVD.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(LinalgError::InvalidArgument("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        let i = a.data.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(LinalgError::NonFinite(i));
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(SvdResult { u: t.v, singular_values: t.singular_values, v: t.u });
    }
    // Work column-major: cols[j] is column j of the evolving A V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * m as f64;
    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(MAX_JACOBI_SWEEPS));
    }
    let mut sigma: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    for &j in &order {
        let s = sigma[j];
        if s > 0.0 && s > sigma_max * f64::EPSILON * 1e-3 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            ucols.push(Vec::new());
        }
    }
    complete_basis(&mut ucols, m);
    let sorted_sigma: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    sigma = sorted_sigma;
    let u = DenseMatrix::from_fn(m, n, |i, l| ucols[l][i]);
    let v = DenseMatrix::from_fn(n, n, |i, l| vcols[order[l]][i]);
    Ok(SvdResult { u, singular_values: sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills empty entries of `basis` with unit vectors orthogonal to the rest.
fn complete_basis(basis: &mut [Vec<f64>], m: usize) {
    let mut candidate = 0;
    for l in 0..basis.len() {
        if !basis[l].is_empty() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in basis.iter().filter(|b| !b.is_empty()) {
                    let d = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-8 {
                basis[l] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Minimum-norm least-squares solution with singular values below
/// `rcond · σ_max` discarded.
pub fn svd_least_squares(a: &DenseMatrix, b: &[f64], rcond: f64) -> Result<Vector> {
    if !(rcond > 0.0 && rcond <= 1.0) {
        return Err(LinalgError::InvalidArgument(format!("rcond must lie in (0, 1], got {rcond}")));
    }
    if b.len() != a.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} system with rhs of length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let f = svd(a)?;
    solve_with_svd(&f, b, rcond)
}

/// Truncated pseudoinverse applied to `b` using an existing factorization.
pub fn solve_with_svd(f: &SvdResult, b: &[f64], rcond: f64) -> Result<Vector> {
    let (m, k) = f.u.shape();
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch("rhs length for svd solve".into()));
    }
    let n = f.v.rows();
    let cutoff = rcond * f.singular_values.first().copied().unwrap_or(0.0);
    let mut x = vec![0.0; n];
    for l in 0..k {
        let s = f.singular_values[l];
        if s <= 0.0 || s < cutoff {
            continue;
        }
        let coeff = (0..m).map(|i| f.u[(i, l)] * b[i]).sum::<f64>() / s;
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += coeff * f.v[(j, l)];
        }
    }
    Ok(Vector(x))
}

/// 2-norm condition number `σ_max / σ_min`; infinite when singular.
pub fn condition_number(a: &DenseMatrix) -> Result<f64> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let f = svd(a)?;
    let max = f.singular_values[0];
    let min = *f.singular_values.last().unwrap();
    if min == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(max / min)
    }
}
