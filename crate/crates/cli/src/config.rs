//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use nrsfm_uq::fusion::{DEFAULT_OVERLAP, DEFAULT_SEGMENTS};
use nrsfm_uq::solver::SolverConfig;
use nrsfm_uq::stats::McConfig;
use nrsfm_uq::synth::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::args::{CommonArgs, SceneArgs};
use crate::error::{CliError, CliResult};
use crate::io::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input: None,
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub frames: usize,
    pub points: usize,
    pub true_rank: usize,
    pub revolutions: Option<f64>,
    pub elevation: Option<f64>,
    pub normalize: bool,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            frames: 60,
            points: 12,
            true_rank: 3,
            revolutions: None,
            elevation: None,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub trials: usize,
    /// Trial `k` draws noise from seed `base_seed + k`. Defaults to the run seed.
    pub base_seed: Option<u64>,
    pub rank_override: Vec<i32>,
    pub use_rank_search: bool,
    pub bound: f64,
    pub normality_samples: usize,
}

impl Default for McSection {
    fn default() -> Self {
        let d = McConfig::new(1.0, 0);
        Self {
            trials: d.trials,
            base_seed: None,
            rank_override: Vec::new(),
            use_rank_search: d.use_rank_search,
            bound: d.bound,
            normality_samples: d.normality_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub segments: usize,
    pub overlap: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            segments: DEFAULT_SEGMENTS,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub sigma0: Vec<f64>,
    pub solver: SolverConfig,
    pub scene: SceneSection,
    pub mc: McSection,
    pub fusion: FusionSection,
    /// Worker threads; `None` uses every available core.
    pub parallel: Option<usize>,
}

impl RunConfig {
    /// Loads `--config` when given and applies every flag on top.
    pub fn load(common: &CommonArgs) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(common);
        Ok(cfg)
    }

    pub fn apply(&mut self, a: &CommonArgs) {
        if let Some(out) = &a.out {
            self.paths.output = out.clone();
        }
        if let Some(input) = &a.input {
            self.paths.input = Some(input.clone());
        }
        if let Some(seed) = a.seed {
            self.seed = seed;
            self.mc.base_seed = None;
        }
        if !a.sigma0.is_empty() {
            self.sigma0 = a.sigma0.clone();
        }
        if let Some(mu) = a.mu {
            self.solver.mu = Some(mu);
        }
        if let Some(n) = a.max_iters {
            self.solver.max_iters = n;
        }
        if let Some(tol) = a.tol {
            self.solver.rel_tol = tol;
        }
        if a.accelerate {
            self.solver.accelerate = true;
        }
        if let Some(t) = a.trials {
            self.mc.trials = t as usize;
        }
        if !a.rank_override.is_empty() {
            self.mc.rank_override = a.rank_override.clone();
        }
        if let Some(k) = a.segments {
            self.fusion.segments = k as usize;
        }
        if let Some(o) = a.overlap {
            self.fusion.overlap = o;
        }
        if let Some(p) = a.parallel {
            self.parallel = Some(p as usize);
        }
    }

    pub fn apply_scene(&mut self, s: &SceneArgs) {
        if let Some(f) = s.frames {
            self.scene.frames = f;
        }
        if let Some(n) = s.points {
            self.scene.points = n;
        }
        if let Some(r) = s.true_rank {
            self.scene.true_rank = r;
        }
        if let Some(rev) = s.revolutions {
            self.scene.revolutions = Some(rev);
        }
        if s.normalize {
            self.scene.normalize = true;
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::new(self.scene.frames, self.scene.points, self.scene.true_rank, self.seed);
        if let Some(rev) = self.scene.revolutions {
            spec.orbit_revolutions = rev;
        }
        if let Some(el) = self.scene.elevation {
            spec.elevation = el;
        }
        spec.normalize = self.scene.normalize;
        spec
    }

    /// The single noise level required by rank search, uq and fuse.
    pub fn single_sigma0(&self) -> CliResult<f64> {
        match self.sigma0.as_slice() {
            [s] => Ok(*s),
            [] => Err(CliError::Config("--sigma0 is required".into())),
            _ => Err(CliError::Config("exactly one --sigma0 value expected".into())),
        }
    }

    /// `None` when all cores should be used.
    pub fn threads(&self) -> CliResult<Option<usize>> {
        match self.parallel {
            Some(0) => Err(CliError::Config("--parallel must be >= 1".into())),
            p => Ok(p),
        }
    }

    /// One Monte Carlo configuration per (sigma0, rank override) pair.
    pub fn mc_configs(&self) -> CliResult<Vec<McConfig>> {
        if self.sigma0.is_empty() {
            return Err(CliError::Config("--sigma0 is required".into()));
        }
        let overrides: Vec<Option<i32>> = if self.mc.rank_override.is_empty() {
            vec![None]
        } else {
            self.mc.rank_override.iter().map(|&p| Some(p)).collect()
        };
        let threads = self.threads()?;
        let mut out = Vec::new();
        for &s in &self.sigma0 {
            for &p in &overrides {
                let cfg = McConfig {
                    trials: self.mc.trials,
                    sigma0: s,
                    base_seed: self.mc.base_seed.unwrap_or(self.seed),
                    rank_override: p,
                    use_rank_search: self.mc.use_rank_search,
                    bound: self.mc.bound,
                    normality_samples: self.mc.normality_samples,
                    threads,
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }

    /// An explicit path, or `name` inside the input directory.
    pub fn input_file(&self, explicit: Option<&Path>, name: &str) -> CliResult<PathBuf> {
        let path = match (explicit, &self.paths.input) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(dir)) => dir.join(name),
            (None, None) => PathBuf::from(name),
        };
        if !path.exists() {
            return Err(CliError::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
        Ok(path)
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.paths.output.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let mut cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 5, "sigma0": [0.1], "solver": {"mu": 0.3}, "mc": {"trials": 20, "base_seed": 9}}"#,
        )
        .unwrap();
        assert_eq!(cfg.solver.max_iters, 2000);
        assert_eq!(cfg.mc.bound, 1.96);
        let flags = CommonArgs {
            seed: Some(7),
            mu: Some(0.05),
            sigma0: vec![0.01, 0.02],
            ..Default::default()
        };
        cfg.apply(&flags);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mc.base_seed, None);
        assert_eq!(cfg.solver.mu, Some(0.05));
        assert_eq!(cfg.sigma0, vec![0.01, 0.02]);
        assert_eq!(cfg.mc.trials, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sigma": 1}"#).is_err());
    }

    #[test]
    fn sweep_grid() {
        let cfg = RunConfig {
            sigma0: vec![0.01, 0.05],
            mc: McSection {
                rank_override: vec![-20, 20],
                ..Default::default()
            },
            ..Default::default()
        };
        let grid = cfg.mc_configs().unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[1].sigma0, 0.01);
        assert_eq!(grid[1].rank_override, Some(20));
    }

    #[test]
    fn sigma0_required() {
        assert!(RunConfig::default().single_sigma0().is_err());
        assert!(RunConfig::default().mc_configs().is_err());
    }
}
