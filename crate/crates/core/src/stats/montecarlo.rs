//! Monte Carlo calibration harness.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal::qq_series;
use super::shapiro::shapiro_wilk_test;
use crate::error::{Error, Result};
use crate::model::{mean_3d_error_rearranged, NoiseModel, RearrangedShape};
use crate::pipeline::{recover, RecoverOptions};
use crate::solver::SolverConfig;
use crate::synth::{add_noise, SyntheticScene};
use crate::uncertainty::{error_ellipse, VARIANCE_SCALE};

fn default_trials() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_bound() -> f64 {
    1.96
}

fn default_normality_samples() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub sigma0: f64,
    #[serde(default)]
    pub base_seed: u64,
    /// Signed percentage perturbation of each trial's selected rank.
    #[serde(default)]
    pub rank_override: Option<i32>,
    #[serde(default = "default_true")]
    pub use_rank_search: bool,
    /// Coverage bound in units of predicted standard deviation.
    #[serde(default = "default_bound")]
    pub bound: f64,
    #[serde(default = "default_normality_samples")]
    pub normality_samples: usize,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl McConfig {
    pub fn new(sigma0: f64, base_seed: u64) -> Self {
        Self {
            trials: default_trials(),
            sigma0,
            base_seed,
            rank_override: None,
            use_rank_search: true,
            bound: default_bound(),
            normality_samples: default_normality_samples(),
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::Spec(format!("need at least 2 trials, got {}", self.trials)));
        }
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return Err(Error::Spec(format!("sigma0 must be > 0, got {}", self.sigma0)));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Spec(format!("bound must be > 0, got {}", self.bound)));
        }
        if matches!(self.rank_override, Some(p) if p <= -100) {
            return Err(Error::Spec("rank override must stay above -100%".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Spec("threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub index: usize,
    pub rank: usize,
    pub rank_converged: bool,
    pub iterations: usize,
    pub solver_converged: bool,
    pub original: DMatrix<f64>,
    pub shape: DMatrix<f64>,
    pub leverage: DMatrix<f64>,
    /// Closed-form 3x3 covariances at the sampled (point, frame) pairs.
    pub point_covariances: Vec<Matrix3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalitySample {
    pub row: usize,
    pub col: usize,
    pub w: Option<f64>,
    pub p_value: Option<f64>,
    /// `(theoretical quantile, standardized order statistic)`.
    pub qq: Vec<(f64, f64)>,
}

/// Off-diagonal correlation of two coordinates of one point in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub point: usize,
    pub frame: usize,
    pub axes: (usize, usize),
    pub empirical: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub config: McConfig,
    pub mean_shape: RearrangedShape,
    pub mean_original: RearrangedShape,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub per_element_coverage: DMatrix<f64>,
    pub accuracy_original: f64,
    pub accuracy_noise_aware: f64,
    pub empirical_variance: DMatrix<f64>,
    /// `3/2 sigma0^2` times the trial-averaged leverage.
    pub predicted_variance: DMatrix<f64>,
    pub normality: Vec<NormalitySample>,
    pub correlations: Vec<CorrelationCheck>,
    pub trials: Vec<TrialOutcome>,
}

/// Scalar digest of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub sigma0: f64,
    pub trials: usize,
    pub base_seed: u64,
    pub rank_override: Option<i32>,
    pub bound: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub accuracy_original: f64,
    pub accuracy_noise_aware: f64,
    pub variance_within_25: f64,
    pub normality_passed: usize,
    pub normality_tested: usize,
    pub correlation_mae: Option<f64>,
    pub mean_rank: f64,
    pub rank_converged_trials: usize,
    pub solver_converged_trials: usize,
    pub mean_iterations: f64,
    pub normality: Vec<NormalitySample>,
}

impl McReport {
    /// Fraction of elements whose empirical variance is within `rel` of the prediction.
    pub fn variance_within(&self, rel: f64) -> f64 {
        let n = self.empirical_variance.len();
        let hits = self
            .empirical_variance
            .iter()
            .zip(self.predicted_variance.iter())
            .filter(|(e, p)| (*e - *p).abs() <= rel * *p)
            .count();
        hits as f64 / n as f64
    }

    pub fn normality_passed(&self, alpha: f64) -> usize {
        self.normality
            .iter()
            .filter(|s| s.p_value.is_some_and(|p| p > alpha))
            .count()
    }

    pub fn correlation_mae(&self) -> Option<f64> {
        if self.correlations.is_empty() {
            return None;
        }
        let total: f64 = self
            .correlations
            .iter()
            .map(|c| (c.empirical - c.predicted).abs())
            .sum();
        Some(total / self.correlations.len() as f64)
    }

    /// Per-trial errors against the Monte Carlo mean.
    pub fn trial_errors(&self) -> Vec<DMatrix<f64>> {
        self.trials
            .iter()
            .map(|t| &t.shape - self.mean_shape.data())
            .collect()
    }

    pub fn summary(&self) -> McSummary {
        let t = self.trials.len() as f64;
        McSummary {
            sigma0: self.config.sigma0,
            trials: self.trials.len(),
            base_seed: self.config.base_seed,
            rank_override: self.config.rank_override,
            bound: self.config.bound,
            coverage_mean: self.coverage_mean,
            coverage_std: self.coverage_std,
            accuracy_original: self.accuracy_original,
            accuracy_noise_aware: self.accuracy_noise_aware,
            variance_within_25: self.variance_within(0.25),
            normality_passed: self.normality_passed(0.05),
            normality_tested: self.normality.len(),
            correlation_mae: self.correlation_mae(),
            mean_rank: self.trials.iter().map(|x| x.rank as f64).sum::<f64>() / t,
            rank_converged_trials: self.trials.iter().filter(|x| x.rank_converged).count(),
            solver_converged_trials: self.trials.iter().filter(|x| x.solver_converged).count(),
            mean_iterations: self.trials.iter().map(|x| x.iterations as f64).sum::<f64>() / t,
            normality: self.normality.clone(),
        }
    }
}

/// Mean that is exact when all inputs are identical.
fn mean_of<'a>(items: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> Option<DMatrix<f64>> {
    let mut it = items.clone();
    let first = it.next()?.clone();
    let mut count = 1usize;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for m in it {
        acc += m - &first;
        count += 1;
    }
    Some(first + acc / count as f64)
}

fn sampled_elements(rows: usize, cols: usize, k: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut idx = sample(&mut rng, total, k.min(total)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|e| (e % rows, e / rows)).collect()
}

fn run_trial(
    scene: &SyntheticScene,
    cfg: &McConfig,
    solver_cfg: &SolverConfig,
    opts: &RecoverOptions,
    points: &[(usize, usize)],
    index: usize,
) -> Result<TrialOutcome> {
    let noise = NoiseModel::new(cfg.sigma0, cfg.base_seed.wrapping_add(index as u64))?;
    let w = add_noise(&scene.tracks_clean, &noise);
    let rec = recover(&w, &scene.rotations, cfg.sigma0, solver_cfg, opts)?;
    let point_covariances = points
        .iter()
        .map(|&(p, c)| Ok(error_ellipse(&rec.factors, cfg.sigma0, p, c)?.covariance))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialOutcome {
        index,
        rank: rec.rank,
        rank_converged: rec.search.as_ref().is_some_and(|s| s.converged),
        iterations: rec.solve.iterations,
        solver_converged: rec.solve.converged,
        original: rec.solve.shape.into_inner(),
        shape: rec.shape.into_inner(),
        leverage: rec.field.v,
        point_covariances,
    })
}

pub fn run_monte_carlo(scene: &SyntheticScene, cfg: &McConfig, solver_cfg: &SolverConfig) -> Result<McReport> {
    cfg.validate()?;
    solver_cfg.validate()?;
    let n = scene.spec.points;
    let f = scene.spec.frames;
    let rows = 3 * n;
    let opts = RecoverOptions {
        use_rank_search: cfg.use_rank_search,
        rank_override: cfg.rank_override,
    };
    let elements = sampled_elements(rows, f, cfg.normality_samples, cfg.base_seed);
    let mut points: Vec<(usize, usize)> = elements.iter().map(|&(i, j)| (i % n, j)).collect();
    points.sort_unstable();
    points.dedup();

    let work = || -> Vec<Result<TrialOutcome>> {
        (1..=cfg.trials)
            .into_par_iter()
            .map(|k| {
                run_trial(scene, cfg, solver_cfg, &opts, &points, k).map_err(|e| Error::Trial {
                    index: k,
                    source: Box::new(e),
                })
            })
            .collect()
    };
    let results = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Spec(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let trials: Vec<TrialOutcome> = results.into_iter().collect::<Result<_>>()?;
    let t = trials.len() as f64;

    let mean_shape = mean_of(trials.iter().map(|x| &x.shape)).expect("at least two trials");
    let mean_original = mean_of(trials.iter().map(|x| &x.original)).expect("at least two trials");
    let mean_leverage = mean_of(trials.iter().map(|x| &x.leverage)).expect("at least two trials");

    let s2 = cfg.sigma0 * cfg.sigma0;
    let mut hits = DMatrix::<f64>::zeros(rows, f);
    let mut sq = DMatrix::<f64>::zeros(rows, f);
    for tr in &trials {
        for idx in 0..rows * f {
            let e = tr.shape[idx] - mean_shape[idx];
            let limit = cfg.bound * (VARIANCE_SCALE * s2 * tr.leverage[idx]).sqrt();
            if e.abs() <= limit {
                hits[idx] += 1.0;
            }
            sq[idx] += e * e;
        }
    }
    let per_element_coverage = hits / t;
    let empirical_variance = sq / (t - 1.0);
    let predicted_variance = mean_leverage.scale(VARIANCE_SCALE * s2);
    let count = per_element_coverage.len() as f64;
    let coverage_mean = per_element_coverage.sum() / count;
    let coverage_std = (per_element_coverage
        .iter()
        .map(|c| (c - coverage_mean).powi(2))
        .sum::<f64>()
        / count)
        .sqrt();

    let mean_shape = RearrangedShape::new(mean_shape)?;
    let mean_original = RearrangedShape::new(mean_original)?;
    let mut acc_orig = 0.0;
    let mut acc_aware = 0.0;
    for tr in &trials {
        acc_orig += mean_3d_error_rearranged(&RearrangedShape::new(tr.original.clone())?, &mean_original)?;
        acc_aware += mean_3d_error_rearranged(&RearrangedShape::new(tr.shape.clone())?, &mean_shape)?;
    }

    let normality = elements
        .iter()
        .map(|&(i, j)| {
            let errs: Vec<f64> = trials.iter().map(|tr| tr.shape[(i, j)] - mean_shape.data()[(i, j)]).collect();
            let (w, p) = match shapiro_wilk_test(&errs) {
                Ok(sw) => (Some(sw.w), Some(sw.p_value)),
                Err(Error::DegenerateSample(_)) | Err(Error::Spec(_)) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(NormalitySample {
                row: i,
                col: j,
                w,
                p_value: p,
                qq: qq_series(&errs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut correlations = Vec::new();
    for (k, &(p, c)) in points.iter().enumerate() {
        let idx = [p, n + p, 2 * n + p];
        let mut emp = Matrix3::<f64>::zeros();
        let mut pred = Matrix3::<f64>::zeros();
        for tr in &trials {
            let e: Vec<f64> = idx.iter().map(|&r| tr.shape[(r, c)] - mean_shape.data()[(r, c)]).collect();
            for a in 0..3 {
                for b in 0..3 {
                    emp[(a, b)] += e[a] * e[b] / (t - 1.0);
                }
            }
            pred += tr.point_covariances[k] / t;
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let ed = (emp[(a, a)] * emp[(b, b)]).sqrt();
            let pd = (pred[(a, a)] * pred[(b, b)]).sqrt();
            if ed > 0.0 && pd > 0.0 {
                correlations.push(CorrelationCheck {
                    point: p,
                    frame: c,
                    axes: (a, b),
                    empirical: emp[(a, b)] / ed,
                    predicted: pred[(a, b)] / pd,
                });
            }
        }
    }

    log::info!(
        "monte carlo sigma0={} trials={} coverage={:.4}±{:.4}",
        cfg.sigma0,
        trials.len(),
        coverage_mean,
        coverage_std
    );
    Ok(McReport {
        config: cfg.clone(),
        mean_shape,
        mean_original,
        coverage_mean,
        coverage_std,
        per_element_coverage,
        accuracy_original: acc_orig / t,
        accuracy_noise_aware: acc_aware / t,
        empirical_variance,
        predicted_variance,
        normality,
        correlations,
        trials,
    })
}
