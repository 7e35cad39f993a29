//! Nuclear-norm regularized least squares over the rearranged shape.
//!
//! Minimizes `mu * ||S#||_* + 1/2 ||W - R S||_F^2` with `R` fixed by
//! proximal gradient steps
//!
//! ```text
//! S# <- SVT_mu( S# - g(R^T (R S - W)) )
//! ```
//!
//! with unit step. `R R^T = I` makes `R^T R` an orthogonal projector, so the
//! gradient of the data term is 1-Lipschitz and the unit step is always a
//! descent step.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{nuclear_norm, singular_values};
use crate::model::{back_project, project_rearranged, RearrangedShape, RotationStack, TrackMatrix};

/// `mu = DEFAULT_MU_SCALE * sigma_1(g(R^T W))` when no explicit weight is set.
pub const DEFAULT_MU_SCALE: f64 = 0.01;

fn default_max_iters() -> usize {
    2000
}

fn default_rel_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Nuclear-norm weight. `None` selects the scale-adaptive default.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Nesterov momentum with function-value restart.
    #[serde(default)]
    pub accelerate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu: None,
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            accelerate: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(mu) = self.mu {
            if !(mu > 0.0) || !mu.is_finite() {
                return Err(Error::Spec(format!("mu must be > 0, got {mu}")));
            }
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Spec(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        Ok(())
    }

    pub fn resolve_mu(&self, w: &TrackMatrix, r: &RotationStack) -> Result<f64> {
        match self.mu {
            Some(mu) => Ok(mu),
            None => default_mu(w, r),
        }
    }
}

pub fn default_mu(w: &TrackMatrix, r: &RotationStack) -> Result<f64> {
    let lifted = back_project(r, w.data())?;
    let s1 = singular_values(&lifted)?.get(0).copied().unwrap_or(0.0);
    Ok((DEFAULT_MU_SCALE * s1).max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub shape: RearrangedShape,
    pub iterations: usize,
    /// Objective at the initial point followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub mu: f64,
}

/// Soft-thresholds the singular values of `m` by `lambda`.
pub fn svt(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    Ok(svt_with_norm(m, lambda)?.0)
}

/// Thresholded matrix together with its nuclear norm.
fn svt_with_norm(m: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    if !(lambda >= 0.0) {
        return Err(Error::Spec(format!("threshold must be >= 0, got {lambda}")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry before thresholding".into()));
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD factors missing".into()));
    };
    let keep: Vec<(usize, f64)> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter_map(|(k, &s)| (s > lambda).then_some((k, s - lambda)))
        .collect();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut nuc = 0.0;
    for &(k, s) in &keep {
        out.ger(s, &u.column(k), &v_t.row(k).transpose(), 1.0);
        nuc += s;
    }
    Ok((out, nuc))
}

fn check_dims(s_sharp: &DMatrix<f64>, w: &TrackMatrix, r: &RotationStack) -> Result<()> {
    if r.frames() != w.frames() {
        return Err(dim_err(format!(
            "{} rotation blocks for {} track frames",
            r.frames(),
            w.frames()
        )));
    }
    if s_sharp.nrows() != 3 * w.points() || s_sharp.ncols() != w.frames() {
        return Err(dim_err(format!(
            "rearranged shape {}x{} does not match {} points x {} frames",
            s_sharp.nrows(),
            s_sharp.ncols(),
            w.points(),
            w.frames()
        )));
    }
    Ok(())
}

fn data_term(s_sharp: &DMatrix<f64>, w: &TrackMatrix, r: &RotationStack) -> Result<f64> {
    let resid = project_rearranged(r, s_sharp)? - w.data();
    Ok(0.5 * resid.norm_squared())
}

/// `mu * ||S#||_* + 1/2 ||W - R g^-1(S#)||_F^2`.
pub fn objective(s_sharp: &RearrangedShape, w: &TrackMatrix, r: &RotationStack, mu: f64) -> Result<f64> {
    check_dims(s_sharp.data(), w, r)?;
    Ok(mu * nuclear_norm(s_sharp.data())? + data_term(s_sharp.data(), w, r)?)
}

/// One proximal gradient step from `s_sharp`.
pub fn prox_step(s_sharp: &DMatrix<f64>, w: &TrackMatrix, r: &RotationStack, mu: f64) -> Result<DMatrix<f64>> {
    check_dims(s_sharp, w, r)?;
    let resid = project_rearranged(r, s_sharp)? - w.data();
    let z = s_sharp - back_project(r, &resid)?;
    svt(&z, mu)
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.norm().max(new.norm());
    if denom == 0.0 {
        0.0
    } else {
        (new - old).norm() / denom
    }
}

/// Solves from the back-projection `g(R^T W)`.
pub fn solve(w: &TrackMatrix, r: &RotationStack, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    if r.frames() != w.frames() {
        return Err(dim_err(format!(
            "{} rotation blocks for {} track frames",
            r.frames(),
            w.frames()
        )));
    }
    let init = back_project(r, w.data())?;
    solve_from(w, r, cfg, init)
}

/// Continuation over a decreasing sequence of weights, each stage warm-started
/// from the previous one. `cfg.mu` is ignored.
pub fn solve_path(w: &TrackMatrix, r: &RotationStack, cfg: &SolverConfig, mus: &[f64]) -> Result<SolveReport> {
    let (first, rest) = mus
        .split_first()
        .ok_or_else(|| Error::Spec("empty continuation path".into()))?;
    let stage = |mu: f64| SolverConfig { mu: Some(mu), ..cfg.clone() };
    let mut report = solve(w, r, &stage(*first))?;
    for &mu in rest {
        let iterations = report.iterations;
        let mut trace = std::mem::take(&mut report.objective_trace);
        let next = solve_from(w, r, &stage(mu), report.shape.into_inner())?;
        trace.extend_from_slice(&next.objective_trace);
        report = SolveReport {
            iterations: iterations + next.iterations,
            objective_trace: trace,
            ..next
        };
    }
    Ok(report)
}

/// Solves from an explicit `3N x F` starting point.
pub fn solve_from(w: &TrackMatrix, r: &RotationStack, cfg: &SolverConfig, init: DMatrix<f64>) -> Result<SolveReport> {
    cfg.validate()?;
    check_dims(&init, w, r)?;
    let mu = cfg.resolve_mu(w, r)?;
    let wmat = w.data();

    let mut s = init;
    let mut obj = mu * nuclear_norm(&s)? + data_term(&s, w, r)?;
    let mut trace = vec![obj];
    let mut momentum = s.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let base = if cfg.accelerate { &momentum } else { &s };
        let resid = project_rearranged(r, base)? - wmat;
        let z = base - back_project(r, &resid)?;
        let (s_new, nuc) = svt_with_norm(&z, mu)?;
        let obj_new = mu * nuc + data_term(&s_new, w, r)?;
        if !obj_new.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at iteration {it}")));
        }
        let change = relative_change(&s_new, &s);

        if cfg.accelerate {
            if obj_new > obj {
                t = 1.0;
                momentum.copy_from(&s_new);
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                momentum = &s_new + (&s_new - &s) * ((t - 1.0) / t_next);
                t = t_next;
            }
        }
        s = s_new;
        obj = obj_new;
        trace.push(obj);
        if change < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    log::debug!("solve: mu={mu:.4e} iterations={iterations} converged={converged} objective={obj:.6e}");

    Ok(SolveReport {
        shape: RearrangedShape::new(s)?,
        iterations,
        objective_trace: trace,
        converged,
        mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{inverse_rearrange, project};
    use crate::synth::{add_noise, generate, SceneSpec};
    use crate::model::NoiseModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svt_zero_threshold_is_identity() {
        let m = random(7, 4, 1);
        assert!((svt(&m, 0.0).unwrap() - &m).abs().max() < 1e-12);
    }

    #[test]
    fn svt_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let out = svt(&m, 2.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((out - expected).abs().max() < 1e-12);
    }

    #[test]
    fn svt_nuclear_norm_shrinks_by_lambda() {
        let m = random(8, 5, 4);
        let s = singular_values(&m).unwrap();
        let expected: f64 = s.iter().map(|x| (x - 0.5).max(0.0)).sum();
        let out = svt(&m, 0.5).unwrap();
        assert!((nuclear_norm(&out).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn svt_rejects_negative_threshold() {
        assert!(matches!(svt(&random(2, 2, 0), -1.0), Err(Error::Spec(_))));
    }

    fn small_instance(seed: u64) -> (TrackMatrix, RotationStack) {
        let scene = generate(&SceneSpec::new(6, 3, 2, seed)).unwrap();
        let w = add_noise(&scene.tracks_clean, &NoiseModel::new(0.05, seed + 100).unwrap());
        (w, scene.rotations)
    }

    #[test]
    fn objective_trivial_cases() {
        let (w, r) = small_instance(1);
        let zero = RearrangedShape::zeros(w.points(), w.frames());
        let zero_w = TrackMatrix::new(DMatrix::zeros(w.data().nrows(), w.points())).unwrap();
        assert_eq!(objective(&zero, &zero_w, &r, 0.3).unwrap(), 0.0);
        let expected = 0.5 * w.data().norm_squared();
        assert!((objective(&zero, &w, &r, 0.3).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn objective_matches_term_by_term() {
        let (w, r) = small_instance(2);
        let s = RearrangedShape::new(random(9, 6, 5)).unwrap();
        let mu = 0.37;
        let nuc: f64 = singular_values(s.data()).unwrap().iter().sum();
        let shape = inverse_rearrange(&s);
        let mut resid = 0.0;
        for i in 0..6 {
            for a in 0..2 {
                for j in 0..3 {
                    let mut proj = 0.0;
                    for c in 0..3 {
                        proj += r.block(i)[(a, c)] * shape.data()[(3 * i + c, j)];
                    }
                    resid += (w.data()[(2 * i + a, j)] - proj).powi(2);
                }
            }
        }
        let expected = mu * nuc + 0.5 * resid;
        assert!((objective(&s, &w, &r, mu).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn objective_dimension_mismatch() {
        let (w, r) = small_instance(3);
        let s = RearrangedShape::zeros(4, 6);
        assert!(matches!(objective(&s, &w, &r, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_observation_gives_zero_shape() {
        let (w, r) = small_instance(4);
        let zero_w = TrackMatrix::new(DMatrix::zeros(w.data().nrows(), w.points())).unwrap();
        let report = solve(&zero_w, &r, &SolverConfig { mu: Some(0.5), ..Default::default() }).unwrap();
        assert!(report.converged);
        assert_eq!(report.shape.data().abs().max(), 0.0);
    }

    #[test]
    fn tiny_mu_reproduces_clean_tracks() {
        let scene = generate(&SceneSpec::new(8, 4, 2, 6)).unwrap();
        let cfg = SolverConfig {
            mu: Some(1e-12),
            max_iters: 200,
            ..Default::default()
        };
        let report = solve(&scene.tracks_clean, &scene.rotations, &cfg).unwrap();
        let reproj = project(&scene.rotations, &inverse_rearrange(&report.shape)).unwrap();
        let rel = (reproj.data() - scene.tracks_clean.data()).norm() / scene.tracks_clean.data().norm();
        assert!(rel < 1e-6, "relative reprojection error {rel}");
    }

    #[test]
    fn monotone_descent_without_momentum() {
        let (w, r) = small_instance(7);
        let report = solve(&w, &r, &SolverConfig { mu: Some(0.1), ..Default::default() }).unwrap();
        for pair in report.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn converged_point_is_fixed() {
        let (w, r) = small_instance(8);
        let cfg = SolverConfig { mu: Some(0.1), ..Default::default() };
        let report = solve(&w, &r, &cfg).unwrap();
        assert!(report.converged);
        let next = prox_step(report.shape.data(), &w, &r, 0.1).unwrap();
        assert!(relative_change(&next, report.shape.data()) < 10.0 * cfg.rel_tol);
    }

    #[test]
    fn acceleration_reaches_same_optimum() {
        let (w, r) = small_instance(9);
        let plain = solve(&w, &r, &SolverConfig { mu: Some(0.1), max_iters: 20000, rel_tol: 1e-11, ..Default::default() }).unwrap();
        let fast = solve(&w, &r, &SolverConfig { mu: Some(0.1), max_iters: 20000, rel_tol: 1e-11, accelerate: true }).unwrap();
        let a = objective(&plain.shape, &w, &r, 0.1).unwrap();
        let b = objective(&fast.shape, &w, &r, 0.1).unwrap();
        assert!((a - b).abs() / a < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn continuation_matches_direct_solve() {
        let (w, r) = small_instance(11);
        let cfg = SolverConfig { max_iters: 20000, rel_tol: 1e-11, accelerate: true, ..Default::default() };
        let direct = solve(&w, &r, &SolverConfig { mu: Some(0.05), ..cfg.clone() }).unwrap();
        let path = solve_path(&w, &r, &cfg, &[1.0, 0.3, 0.1, 0.05]).unwrap();
        assert_eq!(path.mu, 0.05);
        let a = objective(&direct.shape, &w, &r, 0.05).unwrap();
        let b = objective(&path.shape, &w, &r, 0.05).unwrap();
        assert!((a - b).abs() / a < 1e-8, "{a} vs {b}");
        assert!(solve_path(&w, &r, &cfg, &[]).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let (w, r) = small_instance(10);
        assert!(solve(&w, &r, &SolverConfig { mu: Some(0.0), ..Default::default() }).is_err());
        assert!(solve(&w, &r, &SolverConfig { rel_tol: 0.0, ..Default::default() }).is_err());
    }
}
