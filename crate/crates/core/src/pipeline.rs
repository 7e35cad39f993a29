//! Solve, rank-search and uncertainty in one pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_svd;
use crate::model::{RearrangedShape, RotationStack, TrackMatrix};
use crate::rankselect::{search_rank, truncate_rank, RankSearchResult};
use crate::solver::{solve, SolveReport, SolverConfig};
use crate::uncertainty::{factorize, leverage_field, FactorPair, UncertaintyField};

/// Relative threshold for the numerical rank of a raw solver estimate.
pub const NUMERICAL_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverOptions {
    pub use_rank_search: bool,
    /// Signed percentage applied to the selected rank.
    pub rank_override: Option<i32>,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self {
            use_rank_search: true,
            rank_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Recovery {
    pub solve: SolveReport,
    pub search: Option<RankSearchResult>,
    pub rank: usize,
    pub shape: RearrangedShape,
    pub factors: FactorPair,
    pub field: UncertaintyField,
}

/// `round(rank * (1 + percent / 100))` clamped to `1..=max`.
pub fn perturb_rank(rank: usize, percent: i32, max: usize) -> usize {
    let scaled = (rank as f64 * (1.0 + percent as f64 / 100.0)).round();
    (scaled.max(1.0) as usize).clamp(1, max.max(1))
}

pub fn numerical_rank(s: &RearrangedShape) -> Result<usize> {
    Ok(thin_svd(s.data())?.rank_tol(NUMERICAL_RANK_TOL).max(1))
}

pub fn recover(
    w: &TrackMatrix,
    r: &RotationStack,
    sigma0: f64,
    solver: &SolverConfig,
    opts: &RecoverOptions,
) -> Result<Recovery> {
    if let Some(p) = opts.rank_override {
        if p <= -100 {
            return Err(Error::Spec(format!("rank override {p}% leaves no rank")));
        }
    }
    let report = solve(w, r, solver)?;
    let (base_rank, search) = if opts.use_rank_search {
        let s = search_rank(&report.shape, w, r, sigma0)?;
        (s.rank, Some(s))
    } else {
        (numerical_rank(&report.shape)?, None)
    };
    let max = report.shape.max_rank();
    let rank = match opts.rank_override {
        Some(p) => perturb_rank(base_rank, p, max),
        None => base_rank,
    };
    let shape = match &search {
        Some(s) if s.rank == rank => s.shape.clone(),
        _ => truncate_rank(&report.shape, rank)?,
    };
    let factors = factorize(&shape, rank)?;
    let field = leverage_field(&factors, sigma0)?;
    Ok(Recovery {
        solve: report,
        search,
        rank,
        shape,
        factors,
        field,
    })
}
