//! Closed-form element-wise variance and covariance of a rank-`r` shape estimate.
//!
//! For an estimate `S = U diag(s) V^T` observed under isotropic image noise of
//! standard deviation `sigma0`, each element error is approximately Gaussian
//! with variance
//!
//! ```text
//! var(i, j) = 3/2 * sigma0^2 * (||U_i||^2 + ||V_j||^2)
//! ```
//!
//! where `U_i`, `V_j` are rows of the factors. The leverage score
//! `v_ij = ||U_i||^2 + ||V_j||^2` lies in `[0, 2]`.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_svd;
use crate::model::RearrangedShape;

/// Variance scale factor `1/p` with `p = 2/3`.
pub const VARIANCE_SCALE: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct FactorPair {
    /// `3N x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending singular values.
    pub sigma: DVector<f64>,
    /// `F x r`, orthonormal columns.
    pub v: DMatrix<f64>,
    /// `u * diag(sigma)^(1/2)`.
    pub x: DMatrix<f64>,
    /// `v * diag(sigma)^(1/2)`.
    pub y: DMatrix<f64>,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `x * y^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.x * self.y.transpose()
    }

    /// Copy with `x`, `y` replaced by `x q`, `y q`.
    pub fn rotated(&self, q: &DMatrix<f64>) -> FactorPair {
        FactorPair {
            u: self.u.clone(),
            sigma: self.sigma.clone(),
            v: self.v.clone(),
            x: &self.x * q,
            y: &self.y * q,
        }
    }
}

pub fn factorize(s_sharp: &RearrangedShape, r: usize) -> Result<FactorPair> {
    let max = s_sharp.max_rank();
    if r == 0 || r > max {
        return Err(Error::Spec(format!("rank {r} outside 1..={max}")));
    }
    let svd = thin_svd(s_sharp.data())?;
    let u = svd.u.columns(0, r).clone_owned();
    let v = svd.v.columns(0, r).clone_owned();
    let sigma = svd.singular_values.rows(0, r).clone_owned();
    let mut x = u.clone();
    let mut y = v.clone();
    for k in 0..r {
        let root = sigma[k].sqrt();
        x.column_mut(k).scale_mut(root);
        y.column_mut(k).scale_mut(root);
    }
    Ok(FactorPair { u, sigma, v, x, y })
}

/// Orthogonal `H` minimizing `||x H - x_ref||^2 + ||y H - y_ref||^2`.
pub fn rectify(noisy: &FactorPair, reference: &FactorPair) -> Result<DMatrix<f64>> {
    if noisy.rank() != reference.rank() {
        return Err(Error::Spec(format!(
            "rank mismatch: {} vs {}",
            noisy.rank(),
            reference.rank()
        )));
    }
    if noisy.x.shape() != reference.x.shape() || noisy.y.shape() != reference.y.shape() {
        return Err(Error::Dimension(format!(
            "factor shapes {:?}/{:?} vs {:?}/{:?}",
            noisy.x.shape(),
            noisy.y.shape(),
            reference.x.shape(),
            reference.y.shape()
        )));
    }
    let cross = noisy.x.transpose() * &reference.x + noisy.y.transpose() * &reference.y;
    let scale = (noisy.x.norm_squared() + noisy.y.norm_squared()).sqrt()
        * (reference.x.norm_squared() + reference.y.norm_squared()).sqrt();
    if !(cross.norm() > 1e-14 * scale) {
        return Err(Error::DegenerateAlignment);
    }
    let svd = thin_svd(&cross)?;
    Ok(&svd.u * svd.v.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyField {
    /// `3N x F` leverage scores.
    pub v: DMatrix<f64>,
    pub sigma0: f64,
}

impl UncertaintyField {
    pub fn variance(&self, i: usize, j: usize) -> f64 {
        VARIANCE_SCALE * self.sigma0 * self.sigma0 * self.v[(i, j)]
    }

    pub fn variance_matrix(&self) -> DMatrix<f64> {
        self.v.scale(VARIANCE_SCALE * self.sigma0 * self.sigma0)
    }

    pub fn std_dev(&self, i: usize, j: usize) -> f64 {
        self.variance(i, j).sqrt()
    }
}

fn row_norms_sq(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|row| row.norm_squared()).collect()
}

pub fn leverage_field(f: &FactorPair, sigma0: f64) -> Result<UncertaintyField> {
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::Spec(format!("sigma0 must be >= 0, got {sigma0}")));
    }
    let un = row_norms_sq(&f.u);
    let vn = row_norms_sq(&f.v);
    let v = DMatrix::from_fn(un.len(), vn.len(), |i, j| un[i] + vn[j]);
    Ok(UncertaintyField { v, sigma0 })
}

fn check_index(what: &str, idx: usize, len: usize) -> Result<()> {
    if idx >= len {
        return Err(Error::Spec(format!("{what} index {idx} out of range 0..{len}")));
    }
    Ok(())
}

/// Covariance between elements `(i, j)` and `(m, n)` of the rearranged shape:
/// `3/2 * sigma0^2 * (<V_j, V_n> + <U_i, U_m>)`.
pub fn covariance(f: &FactorPair, sigma0: f64, i: usize, j: usize, m: usize, n: usize) -> Result<f64> {
    check_index("row", i, f.u.nrows())?;
    check_index("row", m, f.u.nrows())?;
    check_index("column", j, f.v.nrows())?;
    check_index("column", n, f.v.nrows())?;
    let vv = f.v.row(j).dot(&f.v.row(n));
    let uu = f.u.row(i).dot(&f.u.row(m));
    Ok(VARIANCE_SCALE * sigma0 * sigma0 * (vv + uu))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCovariance {
    pub point: usize,
    pub frame: usize,
    pub covariance: Matrix3<f64>,
    /// Descending, clipped at zero.
    pub eigenvalues: Vector3<f64>,
    /// Unit principal axes as columns, matching `eigenvalues`.
    pub axes: Matrix3<f64>,
}

/// 3x3 covariance of the X/Y/Z coordinates of `point` in `frame`.
pub fn error_ellipse(f: &FactorPair, sigma0: f64, point: usize, frame: usize) -> Result<PointCovariance> {
    let rows = f.u.nrows();
    if rows % 3 != 0 {
        return Err(Error::Dimension(format!("{rows} factor rows is not a multiple of 3")));
    }
    let n = rows / 3;
    check_index("point", point, n)?;
    check_index("frame", frame, f.v.nrows())?;
    let idx = [point, n + point, 2 * n + point];
    let mut c = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            c[(a, b)] = covariance(f, sigma0, idx[a], frame, idx[b], frame)?;
        }
    }
    let c = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenvalues = Vector3::zeros();
    let mut axes = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = eig.eigenvalues[src].max(0.0);
        axes.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(PointCovariance {
        point,
        frame,
        covariance: c,
        eigenvalues,
        axes,
    })
}
