// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-covariance of key embeddings, variance-threshold rank selection,
//! positive/negative projector construction and the key-edit transform.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, Matrix, SvdResult};

/// Which end of the spectrum a projector keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Leading singular vectors.
    Positive,
    /// Trailing singular vectors after the split index.
    Negative,
}

/// Positive and negative cross-covariances for one (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariancePair {
    pub omega_pos: Matrix,
    pub omega_neg: Matrix,
    pub n_tokens: usize,
}

/// Projectors `P⁺`, `P⁻` learned for one (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub p_pos: Matrix,
    pub p_neg: Matrix,
    pub k_pos: usize,
    pub k_neg: usize,
    pub gamma: f64,
}

/// Positive and negative steering gains. The edit divides their sum by 2,
/// so the effective positive amplification is `g_pos / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringGains {
    pub g_pos: f64,
    pub g_neg: f64,
}

impl SteeringGains {
    pub fn new(g_pos: f64, g_neg: f64) -> Result<Self> {
        if !g_pos.is_finite() || !g_neg.is_finite() {
            return Err(invalid("steering gains must be finite"));
        }
        Ok(Self { g_pos, g_neg })
    }

    pub fn is_zero(&self) -> bool {
        self.g_pos == 0.0 && self.g_neg == 0.0
    }
}

/// `h_neutralᵀ h_signed / n` for paired token rows.
pub fn cross_covariance(h_neutral: &Matrix, h_signed: &Matrix) -> Result<Matrix> {
    if h_neutral.rows() != h_signed.rows() || h_neutral.cols() != h_signed.cols() {
        return Err(invalid(format!(
            "cross-covariance inputs differ in shape: {}x{} vs {}x{}",
            h_neutral.rows(),
            h_neutral.cols(),
            h_signed.rows(),
            h_signed.cols()
        )));
    }
    let n = h_neutral.rows();
    if n == 0 {
        return Err(invalid("cross-covariance needs at least one token"));
    }
    let d = h_neutral.cols();
    let mut omega = Matrix::zeros(d, d);
    let mut acc = vec![0.0; d * d];
    for t in 0..n {
        let a = h_neutral.row(t);
        let b = h_signed.row(t);
        for i in 0..d {
            let ai = a[i];
            let row = &mut acc[i * d..(i + 1) * d];
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += ai * bj;
            }
        }
    }
    let inv = n as f64;
    for i in 0..d {
        for j in 0..d {
            omega.set(i, j, acc[i * d + j] / inv);
        }
    }
    Ok(omega)
}

/// Smallest `k >= 1` whose leading singular values hold at least `gamma` of
/// the total singular value mass.
///
/// For [`Side::Positive`] the projector keeps columns `0..k`; for
/// [`Side::Negative`] `k` is the split index and the projector keeps the
/// trailing columns `k..`. Both sides apply the same head-mass rule.
pub fn select_rank(s: &[f64], gamma: f64, _side: Side) -> Result<usize> {
    if s.is_empty() {
        return Err(invalid("empty singular value sequence"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("singular values must be finite and nonnegative"));
    }
    if s.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("singular values must be sorted descending"));
    }
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Err(invalid("singular values are all zero"));
    }
    let mut cum = 0.0;
    for (i, v) in s.iter().enumerate() {
        cum += v;
        if cum / total >= gamma {
            return Ok(i + 1);
        }
    }
    // cum equals total after the last term, so the ratio reaches 1.
    Ok(s.len())
}

/// Builds `P⁺` from the top `k⁺` left singular vectors of `Ω⁺` and `P⁻`
/// from the left singular vectors of `Ω⁻` after the split index `k⁻`.
pub fn build_projections(
    svd_pos: &SvdResult,
    svd_neg: &SvdResult,
    gamma: f64,
) -> Result<ProjectionPair> {
    let k_pos = select_rank(&svd_pos.s, gamma, Side::Positive)?;
    let k_neg = select_rank(&svd_neg.s, gamma, Side::Negative)?;
    Ok(projections_from_components(
        &svd_pos.u, &svd_neg.u, k_pos, k_neg, gamma,
    ))
}

pub(crate) fn projections_from_components(
    u_pos: &Matrix,
    u_neg: &Matrix,
    k_pos: usize,
    k_neg: usize,
    gamma: f64,
) -> ProjectionPair {
    let d = u_neg.cols();
    if k_neg >= d {
        log::warn!("negative split index {k_neg} leaves no trailing components; P- is zero");
    }
    ProjectionPair {
        p_pos: u_pos.column_projector(0..k_pos),
        p_neg: u_neg.column_projector(k_neg.min(d)..d),
        k_pos,
        k_neg,
        gamma,
    }
}

/// `(g⁺ P⁺ + g⁻ P⁻) / 2`, the matrix `M` with `k' = k + M k`.
pub fn edit_matrix(pair: &ProjectionPair, gains: SteeringGains) -> Matrix {
    let pos = pair.p_pos.scale(gains.g_pos);
    let neg = pair.p_neg.scale(gains.g_neg);
    pos.add(&neg)
        .expect("projectors share a shape")
        .scale(0.5)
}

/// `k' = k + (g⁺ P⁺ k + g⁻ P⁻ k) / 2`.
pub fn edit_key(k: &[f64], pair: &ProjectionPair, gains: SteeringGains) -> Result<Vec<f64>> {
    if k.len() != pair.p_pos.cols() {
        return Err(invalid(format!(
            "key of length {} does not match projector dimension {}",
            k.len(),
            pair.p_pos.cols()
        )));
    }
    let pk = pair.p_pos.mul_vec(k)?;
    let nk = pair.p_neg.mul_vec(k)?;
    Ok(k.iter()
        .zip(pk.iter().zip(&nk))
        .map(|(&x, (&p, &n))| x + (gains.g_pos * p + gains.g_neg * n) / 2.0)
        .collect())
}

/// Orthogonal split of `x` into its component inside `span(U)` and the rest.
pub fn decompose_subspace(x: &[f64], u: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != u.rows() {
        return Err(invalid(format!(
            "vector of length {} does not match basis rows {}",
            x.len(),
            u.rows()
        )));
    }
    check_orthonormal(u, 1e-8)?;
    let coords: Vec<f64> = (0..u.cols()).map(|c| dot(&u.column(c), x)).collect();
    let parallel: Vec<f64> = (0..u.rows())
        .map(|i| (0..u.cols()).map(|c| u.get(i, c) * coords[c]).sum())
        .collect();
    let perp = x.iter().zip(&parallel).map(|(a, b)| a - b).collect();
    Ok((parallel, perp))
}

/// `(I + g U Uᵀ) x`, the single-projector form of the key edit.
pub fn amplify(x: &[f64], u: &Matrix, g: f64) -> Result<Vec<f64>> {
    let p = u.column_projector(0..u.cols());
    let px = p.mul_vec(x)?;
    Ok(x.iter().zip(&px).map(|(a, b)| a + g * b).collect())
}

fn check_orthonormal(u: &Matrix, tol: f64) -> Result<()> {
    let gram = u.transpose().matmul(u)?;
    let err = gram.sub(&Matrix::identity(u.cols()))?.frobenius_norm();
    if err > tol {
        return Err(invalid(format!(
            "basis columns are not orthonormal (error {err:e})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_covariance_forced_arithmetic() {
        let h = Matrix::identity(2);
        let hs = Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]).unwrap();
        let omega = cross_covariance(&h, &hs).unwrap();
        assert_eq!(omega, Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    }

    #[test]
    fn cross_covariance_of_zero_signed_keys() {
        let h = Matrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let omega = cross_covariance(&h, &Matrix::zeros(4, 3)).unwrap();
        assert_eq!(omega, Matrix::zeros(3, 3));
    }

    #[test]
    fn cross_covariance_shape_mismatch() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(2, 2);
        assert!(cross_covariance(&a, &b).is_err());
    }

    #[test]
    fn select_rank_examples() {
        assert_eq!(select_rank(&[3.0, 1.0, 0.0], 0.7, Side::Positive).unwrap(), 1);
        assert_eq!(select_rank(&[1.0; 4], 1.0, Side::Positive).unwrap(), 4);
        assert_eq!(select_rank(&[5.0, 3.0, 2.0], 0.5, Side::Positive).unwrap(), 1);
        assert_eq!(select_rank(&[5.0, 3.0, 2.0], 0.5, Side::Negative).unwrap(), 1);
    }

    #[test]
    fn select_rank_errors() {
        assert!(select_rank(&[0.0, 0.0], 0.5, Side::Positive).is_err());
        assert!(select_rank(&[1.0, 2.0], 0.5, Side::Positive).is_err());
        assert!(select_rank(&[1.0], 0.0, Side::Positive).is_err());
        assert!(select_rank(&[1.0], 1.5, Side::Positive).is_err());
        assert!(select_rank(&[], 0.5, Side::Positive).is_err());
    }

    #[test]
    fn negative_tail_uses_columns_after_split() {
        let u = Matrix::identity(3);
        let svd_pos = SvdResult {
            u: u.clone(),
            s: vec![5.0, 3.0, 2.0],
            v: u.clone(),
        };
        let pair = build_projections(&svd_pos, &svd_pos, 0.5).unwrap();
        assert_eq!(pair.k_neg, 1);
        assert_eq!(pair.p_neg, Matrix::from_diag(&[0.0, 1.0, 1.0]));
        assert_eq!(pair.p_pos, Matrix::from_diag(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn axis_subspace_projection() {
        let svd_pos = SvdResult {
            u: Matrix::identity(2),
            s: vec![1.0, 0.0],
            v: Matrix::identity(2),
        };
        let pair = build_projections(&svd_pos, &svd_pos, 0.9).unwrap();
        assert_eq!(pair.p_pos, Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        // the zero singular value's column is retained for P-
        assert_eq!(pair.p_neg, Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]).unwrap());
    }

    #[test]
    fn full_gamma_gives_identity_and_empty_tail() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]).unwrap();
        let dec = svd(&a).unwrap();
        let pair = build_projections(&dec, &dec, 1.0).unwrap();
        assert_eq!(pair.k_pos, 2);
        assert!(pair.p_pos.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 1e-14);
        assert_eq!(pair.p_neg, Matrix::zeros(2, 2));
    }

    #[test]
    fn zero_gain_edit_is_identity() {
        let pair = ProjectionPair {
            p_pos: Matrix::identity(3),
            p_neg: Matrix::identity(3),
            k_pos: 3,
            k_neg: 0,
            gamma: 1.0,
        };
        let k = [0.3, -1.2, 7.0];
        let out = edit_key(&k, &pair, SteeringGains::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(out, k.to_vec());
    }

    #[test]
    fn edit_key_forced_arithmetic() {
        let pair = ProjectionPair {
            p_pos: Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap(),
            p_neg: Matrix::zeros(2, 2),
            k_pos: 1,
            k_neg: 2,
            gamma: 0.5,
        };
        let out = edit_key(&[1.0, 1.0], &pair, SteeringGains::new(2.0, 0.0).unwrap()).unwrap();
        assert_eq!(out, vec![2.0, 1.0]);
        assert!(edit_key(&[1.0], &pair, SteeringGains::new(2.0, 0.0).unwrap()).is_err());
        let m = edit_matrix(&pair, SteeringGains::new(2.0, 0.0).unwrap());
        assert_eq!(m, pair.p_pos);
    }

    #[test]
    fn decomposition_doubles_parallel_component() {
        let u = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let x = [1.0, 1.0];
        let (par, perp) = decompose_subspace(&x, &u).unwrap();
        assert_eq!(par, vec![1.0, 0.0]);
        assert_eq!(perp, vec![0.0, 1.0]);
        let y = amplify(&x, &u, 1.0).unwrap();
        assert_eq!(y, vec![2.0, 1.0]);
        let recomposed: Vec<f64> = perp.iter().zip(&par).map(|(p, q)| p + 2.0 * q).collect();
        assert_eq!(y, recomposed);
    }

    #[test]
    fn orthogonal_vector_is_untouched() {
        let u = Matrix::from_rows(&[[0.0], [1.0], [0.0]]).unwrap();
        let x = [2.0, 0.0, -1.0];
        let (par, perp) = decompose_subspace(&x, &u).unwrap();
        assert!(par.iter().all(|v| *v == 0.0));
        assert_eq!(perp, x.to_vec());
        assert_eq!(amplify(&x, &u, 3.0).unwrap(), x.to_vec());
    }

    #[test]
    fn non_orthonormal_basis_is_rejected() {
        let u = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(decompose_subspace(&[1.0, 0.0], &u).is_err());
    }

    #[test]
    fn parallel_and_perpendicular_are_orthogonal() {
        let u = Matrix::from_rows(&[[0.6, 0.0], [0.8, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0];
        let (par, perp) = decompose_subspace(&x, &u).unwrap();
        assert_abs_diff_eq!(dot(&par, &perp), 0.0, epsilon = 1e-12);
    }
}
