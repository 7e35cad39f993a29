//! Monte Carlo report files and their markdown rendering.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use nrsfm_uq::solver::SolverConfig;
use nrsfm_uq::stats::{McReport, McSummary};
use nrsfm_uq::synth::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, store_matrix, write_text, MatrixKind};

/// One Monte Carlo run as stored in `mc_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub summary: McSummary,
    pub mean_empirical_variance: f64,
    pub mean_predicted_variance: f64,
    /// Per-element coverage, one inner vector per row of the `3N x F` layout.
    pub coverage: Vec<Vec<f64>>,
}

impl RunRecord {
    pub fn from_report(r: &McReport) -> Self {
        let n = r.empirical_variance.len().max(1) as f64;
        Self {
            summary: r.summary(),
            mean_empirical_variance: r.empirical_variance.sum() / n,
            mean_predicted_variance: r.predicted_variance.sum() / n,
            coverage: r
                .per_element_coverage
                .row_iter()
                .map(|row| row.iter().copied().collect())
                .collect(),
        }
    }

    pub fn coverage_matrix(&self) -> CliResult<Option<DMatrix<f64>>> {
        let rows = self.coverage.len();
        if rows == 0 {
            return Ok(None);
        }
        let cols = self.coverage[0].len();
        if self.coverage.iter().any(|r| r.len() != cols) {
            return Err(CliError::Config("ragged coverage matrix in report".into()));
        }
        let flat: Vec<f64> = self.coverage.iter().flatten().copied().collect();
        Ok(Some(DMatrix::from_row_slice(rows, cols, &flat)))
    }

    pub fn label(&self) -> String {
        let mut s = format!("sigma0_{}", self.summary.sigma0);
        if let Some(p) = self.summary.rank_override {
            let _ = write!(s, "_rank{p:+}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct McReportFile {
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    pub runs: Vec<RunRecord>,
}

fn fmt_override(p: Option<i32>) -> String {
    match p {
        Some(p) => format!("{p:+}%"),
        None => "-".into(),
    }
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

pub fn render_markdown(file: &McReportFile) -> String {
    let mut md = String::from("# Monte Carlo summary\n\n");
    if let Some(s) = &file.scene {
        let _ = writeln!(
            md,
            "Scene: {} frames, {} points, true rank {}, seed {}.\n",
            s.frames, s.points, s.true_rank, s.seed
        );
    }

    md.push_str("## Coverage rate\n\n");
    md.push_str("| sigma0 | rank override | trials | mean rank | bound | coverage mean | coverage std |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for r in &file.runs {
        let s = &r.summary;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.2} | {} | {:.4} | {:.4} |",
            s.sigma0,
            fmt_override(s.rank_override),
            s.trials,
            s.mean_rank,
            s.bound,
            s.coverage_mean,
            s.coverage_std
        );
    }

    md.push_str("\n## Mean 3D error against the Monte Carlo mean\n\n");
    md.push_str("| sigma0 | rank override | original | noise-aware |\n");
    md.push_str("|---|---|---|---|\n");
    for r in &file.runs {
        let s = &r.summary;
        let _ = writeln!(
            md,
            "| {} | {} | {:.6} | {:.6} |",
            s.sigma0,
            fmt_override(s.rank_override),
            s.accuracy_original,
            s.accuracy_noise_aware
        );
    }

    md.push_str("\n## Variance calibration\n\n");
    md.push_str("| sigma0 | rank override | within 25% | mean empirical | mean predicted | correlation MAE |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in &file.runs {
        let s = &r.summary;
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.4e} | {:.4e} | {} |",
            s.sigma0,
            fmt_override(s.rank_override),
            s.variance_within_25,
            r.mean_empirical_variance,
            r.mean_predicted_variance,
            fmt_opt(s.correlation_mae, 4)
        );
    }

    md.push_str("\n## Shapiro-Wilk normality of element errors\n\n");
    md.push_str("| sigma0 | rank override | element | W | p | passed (p > 0.05) |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in &file.runs {
        let s = &r.summary;
        let head = format!("| {} | {} ", s.sigma0, fmt_override(s.rank_override));
        if s.normality.is_empty() {
            let _ = writeln!(md, "{head}| - | - | - | - |");
            continue;
        }
        for n in &s.normality {
            let passed = match n.p_value {
                Some(p) if p > 0.05 => "yes",
                Some(_) => "no",
                None => "-",
            };
            let _ = writeln!(
                md,
                "{head}| ({}, {}) | {} | {} | {passed} |",
                n.row,
                n.col,
                fmt_opt(n.w, 4),
                fmt_opt(n.p_value, 4)
            );
        }
    }
    md
}

fn write_qq(path: &Path, qq: &[(f64, f64)]) -> CliResult<()> {
    let mut text = String::from("theoretical,sample\n");
    for (t, s) in qq {
        let _ = writeln!(text, "{t:.16e},{s:.16e}");
    }
    write_text(path, &text)
}

/// Writes `summary.md`, coverage CSVs and Q-Q series under `out`.
///
/// A single run writes its data files directly into `out`; several runs
/// each get a subdirectory named after their noise level and rank override.
pub fn write_report(file: &McReportFile, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    write_text(&out.join("summary.md"), &render_markdown(file))?;
    let single = file.runs.len() == 1;
    let mut seen = HashSet::new();
    for (k, run) in file.runs.iter().enumerate() {
        let dir = if single {
            out.to_path_buf()
        } else {
            let mut label = run.label();
            if !seen.insert(label.clone()) {
                label = format!("{label}_{k}");
            }
            out.join(label)
        };
        ensure_dir(&dir)?;
        if let Some(cov) = run.coverage_matrix()? {
            store_matrix(&dir.join("coverage.csv"), &cov, MatrixKind::Rearranged)?;
        }
        for n in &run.summary.normality {
            write_qq(&dir.join(format!("qq_{}_{}.csv", n.row, n.col)), &n.qq)?;
        }
    }
    Ok(())
}

/// Concatenates the runs of several report files.
pub fn merge(files: Vec<McReportFile>) -> McReportFile {
    let mut it = files.into_iter();
    let mut first = it.next().unwrap_or_default();
    for f in it {
        if f.scene != first.scene {
            log::warn!("merging reports from different scenes");
            first.scene = None;
        }
        first.runs.extend(f.runs);
    }
    first
}
