//! Noise-aware exact-rank projection of a solver estimate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::thin_svd;
use crate::model::{project_rearranged, RearrangedShape, RotationStack, TrackMatrix};

/// Two-sided 95% Gaussian bound.
pub const RESIDUAL_BOUND: f64 = 1.96;
pub const ACCEPT_FRACTION: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct RankSearchResult {
    pub rank: usize,
    pub shape: RearrangedShape,
    pub residual_fraction: f64,
    pub converged: bool,
}

/// Summary that serializes without the shape payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSearchSummary {
    pub rank: usize,
    pub residual_fraction: f64,
    pub converged: bool,
}

impl From<&RankSearchResult> for RankSearchSummary {
    fn from(r: &RankSearchResult) -> Self {
        Self {
            rank: r.rank,
            residual_fraction: r.residual_fraction,
            converged: r.converged,
        }
    }
}

fn check_rank(s_sharp: &RearrangedShape, r: usize) -> Result<()> {
    let max = s_sharp.max_rank();
    if r == 0 || r > max {
        return Err(Error::Spec(format!("rank {r} outside 1..={max}")));
    }
    Ok(())
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncate_rank(s_sharp: &RearrangedShape, r: usize) -> Result<RearrangedShape> {
    check_rank(s_sharp, r)?;
    let svd = thin_svd(s_sharp.data())?;
    RearrangedShape::new(svd.reconstruct(r))
}

fn within_fraction(resid: &DMatrix<f64>, bound: f64) -> f64 {
    let n = resid.len();
    if n == 0 {
        return 1.0;
    }
    resid.iter().filter(|x| x.abs() <= bound).count() as f64 / n as f64
}

/// Fraction of reprojection residuals within `1.96 * sigma0`, per candidate rank `1..=max`.
pub fn residual_fractions(
    s_sharp: &RearrangedShape,
    w: &TrackMatrix,
    r: &RotationStack,
    sigma0: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    sweep(s_sharp, w, r, sigma0, |frac| {
        out.push(frac);
        false
    })?;
    Ok(out)
}

/// Visits ranks in ascending order until `visit` returns true. Returns the last
/// rank visited and its truncated shape.
fn sweep(
    s_sharp: &RearrangedShape,
    w: &TrackMatrix,
    r: &RotationStack,
    sigma0: f64,
    mut visit: impl FnMut(f64) -> bool,
) -> Result<(usize, DMatrix<f64>, f64)> {
    if !(sigma0 > 0.0) {
        return Err(Error::Spec(format!("sigma0 must be > 0, got {sigma0}")));
    }
    if r.frames() != w.frames() || s_sharp.frames() != w.frames() || s_sharp.points() != w.points() {
        return Err(dim_err(format!(
            "shape {}x{} (points x frames), tracks {}x{}, {} rotations",
            s_sharp.points(),
            s_sharp.frames(),
            w.points(),
            w.frames(),
            r.frames()
        )));
    }
    let svd = thin_svd(s_sharp.data())?;
    let bound = RESIDUAL_BOUND * sigma0;
    let max = s_sharp.max_rank();
    let mut acc = DMatrix::zeros(s_sharp.data().nrows(), s_sharp.data().ncols());
    let mut last = 0.0;
    for k in 0..max {
        acc.ger(svd.singular_values[k], &svd.u.column(k), &svd.v.column(k), 1.0);
        let resid = project_rearranged(r, &acc)? - w.data();
        last = within_fraction(&resid, bound);
        if visit(last) {
            return Ok((k + 1, acc, last));
        }
    }
    Ok((max, acc, last))
}

pub fn search_rank(
    s_sharp: &RearrangedShape,
    w: &TrackMatrix,
    r: &RotationStack,
    sigma0: f64,
) -> Result<RankSearchResult> {
    let mut converged = false;
    let (rank, shape, residual_fraction) = sweep(s_sharp, w, r, sigma0, |frac| {
        converged = frac >= ACCEPT_FRACTION;
        converged
    })?;
    log::debug!("rank search: rank={rank} fraction={residual_fraction:.4} converged={converged}");
    Ok(RankSearchResult {
        rank,
        shape: RearrangedShape::new(shape)?,
        residual_fraction,
        converged,
    })
}
