// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense real linear algebra: a row-major `Matrix`, a one-sided Jacobi SVD
//! with a fixed sign convention, and two-component PCA.
//!
//! Everything here is `f64` and sized for head dimensions (tens to low
//! hundreds), so the kernels favour accuracy and determinism over speed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SekaError};

/// Maximum number of Jacobi sweeps before the SVD gives up.
pub const MAX_SWEEPS: usize = 64;

/// Sweep-level convergence target for the normalized off-diagonal mass.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Pairs whose normalized inner product is below this are left alone.
const ROTATION_SKIP: f64 = 1e-15;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(invalid(format!(
                    "row {i} has length {}, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a `rows x cols` matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows as nested vectors, the layout used by the JSON file formats.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(invalid(format!(
                "vector of length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(invalid(format!(
                "shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Sub-matrix made of the columns in `range`.
    pub fn columns(&self, range: Range<usize>) -> Self {
        let start = range.start;
        Self::from_fn(self.rows, range.len(), |i, j| self.get(i, start + j))
    }

    /// `C Cᵀ` where `C` holds the columns in `range`: the orthogonal
    /// projector onto their span when those columns are orthonormal.
    pub fn column_projector(&self, range: Range<usize>) -> Self {
        let n = self.rows;
        let mut p = Self::zeros(n, n);
        for c in range {
            let col = self.column(c);
            for i in 0..n {
                if col[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    p.data[i * n + j] += col[i] * col[j];
                }
            }
        }
        p
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin SVD `A = U diag(S) Vᵀ` with `r = min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Left singular vectors, `rows x r`.
    pub u: Matrix,
    /// Singular values, descending and nonnegative.
    pub s: Vec<f64>,
    /// Right singular vectors, `cols x r`.
    pub v: Matrix,
}

impl SvdResult {
    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| {
            self.u.get(i, j) * self.s[j]
        });
        us.matmul(&self.v.transpose())
            .expect("svd factors have compatible shapes")
    }
}

/// Thin singular value decomposition by one-sided (Hestenes) Jacobi
/// rotations applied on the smaller dimension.
///
/// Sign convention: in every column of `U` the entry of largest magnitude
/// (lowest row index on ties) is nonnegative; `V` is flipped alongside.
/// Left singular vectors belonging to numerically zero singular values are
/// completed to an orthonormal set from the standard basis.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(invalid("svd input contains NaN or Inf"));
    }
    let mut out = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    apply_sign_convention(&mut out);
    Ok(out)
}

/// Jacobi SVD for `rows >= cols`, orthogonalizing the columns of `A`.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w[p], &w[q]);
                let rel = gamma / (alpha.sqrt() * beta.sqrt());
                off += rel * rel;
                if rel.abs() <= ROTATION_SKIP {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if off.sqrt() <= OFF_DIAGONAL_TOL {
            converged = true;
        }
    }
    if !converged {
        return Err(SekaError::NumericalFailure(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal singular values in column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_max = norms[order[0]];
    let negligible = s_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let sj = norms[j];
        let candidate = if sj > negligible {
            let mut u: Vec<f64> = w[j].iter().map(|x| x / sj).collect();
            reorthogonalize(&mut u, &u_cols);
            Some(u)
        } else {
            None
        };
        let u = match candidate {
            Some(u) => u,
            None => complete_basis(m, &u_cols),
        };
        u_cols.push(u);
        s.push(sj);
        v_cols.push(v[j].clone());
    }

    Ok(SvdResult {
        u: Matrix::from_columns(m, &u_cols),
        s,
        v: Matrix::from_columns(n, &v_cols),
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Two passes of modified Gram-Schmidt against `basis`, then normalize.
fn reorthogonalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = dot(u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
    let nrm = norm(u);
    for x in u.iter_mut() {
        *x /= nrm;
    }
}

/// Unit vector orthogonal to `basis`, taken from the standard basis vector
/// with the largest residual.
fn complete_basis(m: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let r = norm(&e);
        if best.as_ref().is_none_or(|(br, _)| r > *br + 1e-12) {
            best = Some((r, e));
        }
    }
    let (r, mut e) = best.expect("m >= 1");
    for x in e.iter_mut() {
        *x /= r;
    }
    e
}

fn apply_sign_convention(svd: &mut SvdResult) {
    let (m, r) = (svd.u.rows(), svd.u.cols());
    for j in 0..r {
        let mut pivot = 0;
        for i in 1..m {
            if svd.u.get(i, j).abs() > svd.u.get(pivot, j).abs() {
                pivot = i;
            }
        }
        if svd.u.get(pivot, j) < 0.0 {
            for i in 0..m {
                svd.u.set(i, j, -svd.u.get(i, j));
            }
            for i in 0..svd.v.rows() {
                svd.v.set(i, j, -svd.v.get(i, j));
            }
        }
    }
}

/// Result of [`pca2`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// Centered points projected on the two components, `n x 2`.
    pub projected: Matrix,
    /// Top two right singular vectors of the centered data, `d x 2`.
    pub components: Matrix,
    /// Column means that were subtracted.
    pub mean: Vec<f64>,
}

/// Two-component PCA of the rows of `points`.
pub fn pca2(points: &Matrix) -> Result<Pca2> {
    let (n, d) = (points.rows(), points.cols());
    if n < 2 || d < 2 {
        return Err(invalid(format!(
            "pca2 needs at least 2 rows and 2 columns, got {n}x{d}"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| points.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, d, |i, j| points.get(i, j) - mean[j]);
    let dec = svd(&centered)?;
    let components = dec.v.columns(0..2);
    let projected = centered.matmul(&components)?;
    Ok(Pca2 {
        projected,
        components,
        mean,
    })
}
