use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use nrsfm_uq::fusion::{plan_segments, run_segmented, SegmentPlan};
use nrsfm_uq::pipeline::{numerical_rank, recover, RecoverOptions};
use nrsfm_uq::rankselect::search_rank;
use nrsfm_uq::solver::{objective, solve};
use nrsfm_uq::stats::run_monte_carlo;
use nrsfm_uq::synth::{add_noise, generate, SceneSpec};
use nrsfm_uq::uncertainty::{error_ellipse, factorize, leverage_field, PointCovariance};
use nrsfm_uq::{inverse_rearrange, NoiseModel, RearrangedShape, RotationStack, TrackMatrix};
use serde::Serialize;

use crate::args::{Cli, Command, TrackArgs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{
    ensure_dir, load_rotations, load_shape, load_tracks, store_matrix, store_rotations, store_tracks, write_json,
    write_text, MatrixKind,
};
use crate::report::{merge, write_report, McReportFile, RunRecord};

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(&cli.common)?;
    match cli.command {
        Command::Synth { scene } => {
            cfg.apply_scene(&scene);
            synth(&cfg)
        }
        Command::Solve { io } => solve_cmd(&cfg, &io),
        Command::RankSearch { io, shape } => rank_search(&cfg, &io, shape.as_deref()),
        Command::Uq { shape, rank } => uq(&cfg, shape.as_deref(), rank),
        Command::Mc { scene } => {
            cfg.apply_scene(&scene);
            mc(&cfg)
        }
        Command::Fuse { io } => fuse_cmd(&cfg, &io),
        Command::Report { reports } => report(&cfg, &reports),
    }
}

/// Writes a rearranged shape as `<stem>_sharp.csv` and its frame-major form as `<stem>.csv`.
fn store_shape_pair(cfg: &RunConfig, stem: &str, s: &RearrangedShape) -> CliResult<()> {
    store_matrix(&cfg.out_file(&format!("{stem}_sharp.csv")), s.data(), MatrixKind::Rearranged)?;
    store_matrix(&cfg.out_file(&format!("{stem}.csv")), inverse_rearrange(s).data(), MatrixKind::Shape)?;
    Ok(())
}

fn load_inputs(cfg: &RunConfig, io: &TrackArgs) -> CliResult<(TrackMatrix, RotationStack)> {
    let w = load_tracks(&cfg.input_file(io.tracks.as_deref(), "tracks.csv")?)?;
    let r = load_rotations(&cfg.input_file(io.rotations.as_deref(), "rotations.json")?)?;
    if w.frames() != r.frames() {
        return Err(nrsfm_uq::Error::Dimension(format!(
            "tracks have {} frames, rotations {}",
            w.frames(),
            r.frames()
        ))
        .into());
    }
    Ok((w, r))
}

#[derive(Serialize)]
struct SceneManifest<'a> {
    frames: usize,
    points: usize,
    kind: MatrixKind,
    scene: &'a SceneSpec,
    sigma0: Option<f64>,
    noise_seed: Option<u64>,
    files: Vec<&'static str>,
}

fn synth(cfg: &RunConfig) -> CliResult<()> {
    let spec = cfg.scene_spec();
    let scene = generate(&spec)?;
    ensure_dir(&cfg.paths.output)?;
    store_tracks(&cfg.out_file("tracks_clean.csv"), &scene.tracks_clean)?;
    store_matrix(&cfg.out_file("shape_gt.csv"), scene.shape_gt.data(), MatrixKind::Shape)?;
    store_rotations(&cfg.out_file("rotations.json"), &scene.rotations)?;

    // Noisy tracks use the seed of Monte Carlo trial 1 for the same run seed.
    let (sigma0, noise_seed) = match cfg.sigma0.as_slice() {
        [] => (None, None),
        _ => (Some(cfg.single_sigma0()?), Some(cfg.seed.wrapping_add(1))),
    };
    let tracks = match (sigma0, noise_seed) {
        (Some(s), Some(seed)) => add_noise(&scene.tracks_clean, &NoiseModel::new(s, seed)?),
        _ => scene.tracks_clean.clone(),
    };
    store_tracks(&cfg.out_file("tracks.csv"), &tracks)?;
    write_json(
        &cfg.out_file("manifest.json"),
        &SceneManifest {
            frames: spec.frames,
            points: spec.points,
            kind: MatrixKind::Tracks,
            scene: &spec,
            sigma0,
            noise_seed,
            files: vec!["tracks.csv", "tracks_clean.csv", "shape_gt.csv", "rotations.json"],
        },
    )?;
    println!(
        "synth: {} frames, {} points, rank {} -> {}",
        spec.frames,
        spec.points,
        spec.true_rank,
        cfg.paths.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    mu: f64,
    iterations: usize,
    converged: bool,
    objective: f64,
    numerical_rank: usize,
    objective_trace: &'a [f64],
}

fn solve_cmd(cfg: &RunConfig, io: &TrackArgs) -> CliResult<()> {
    let (w, r) = load_inputs(cfg, io)?;
    let rep = solve(&w, &r, &cfg.solver)?;
    if !rep.converged {
        log::warn!("solver stopped after {} iterations without converging", rep.iterations);
    }
    store_shape_pair(cfg, "s", &rep.shape)?;
    let summary = SolveSummary {
        mu: rep.mu,
        iterations: rep.iterations,
        converged: rep.converged,
        objective: objective(&rep.shape, &w, &r, rep.mu)?,
        numerical_rank: numerical_rank(&rep.shape)?,
        objective_trace: &rep.objective_trace,
    };
    write_json(&cfg.out_file("solve.json"), &summary)?;
    println!(
        "solve: mu={:.6e} iterations={} converged={} rank={}",
        summary.mu, summary.iterations, summary.converged, summary.numerical_rank
    );
    Ok(())
}

#[derive(Serialize)]
struct RankSummary {
    sigma0: f64,
    rank: usize,
    residual_fraction: f64,
    converged: bool,
}

fn rank_search(cfg: &RunConfig, io: &TrackArgs, shape: Option<&Path>) -> CliResult<()> {
    let sigma0 = cfg.single_sigma0()?;
    let (w, r) = load_inputs(cfg, io)?;
    let s = match shape {
        Some(p) => load_shape(&cfg.input_file(Some(p), "")?)?,
        None => solve(&w, &r, &cfg.solver)?.shape,
    };
    let res = search_rank(&s, &w, &r, sigma0)?;
    if !res.converged {
        log::warn!("no rank reached the residual criterion; keeping full rank {}", res.rank);
    }
    store_shape_pair(cfg, "s_rank", &res.shape)?;
    write_json(
        &cfg.out_file("rank.json"),
        &RankSummary {
            sigma0,
            rank: res.rank,
            residual_fraction: res.residual_fraction,
            converged: res.converged,
        },
    )?;
    println!(
        "rank-search: rank={} within-bound fraction={:.4} converged={}",
        res.rank, res.residual_fraction, res.converged
    );
    Ok(())
}

fn ellipse_csv(items: &[PointCovariance]) -> String {
    let mut text = String::from("point,frame,lambda1,lambda2,lambda3");
    for k in 1..=3 {
        let _ = write!(text, ",axis{k}_x,axis{k}_y,axis{k}_z");
    }
    text.push('\n');
    for pc in items {
        let _ = write!(text, "{},{}", pc.point, pc.frame);
        for l in pc.eigenvalues.iter() {
            let _ = write!(text, ",{l:.16e}");
        }
        for k in 0..3 {
            for a in pc.axes.column(k).iter() {
                let _ = write!(text, ",{a:.16e}");
            }
        }
        text.push('\n');
    }
    text
}

#[derive(Serialize)]
struct UqSummary {
    sigma0: f64,
    rank: usize,
    mean_variance: f64,
    max_variance: f64,
}

fn uq(cfg: &RunConfig, shape: Option<&Path>, rank: Option<usize>) -> CliResult<()> {
    let sigma0 = cfg.single_sigma0()?;
    let s = load_shape(&cfg.input_file(shape, "s_rank_sharp.csv")?)?;
    let rank = match rank {
        Some(r) => r,
        None => numerical_rank(&s)?,
    };
    let factors = factorize(&s, rank)?;
    let field = leverage_field(&factors, sigma0)?;
    let variance = field.variance_matrix();
    store_matrix(&cfg.out_file("leverage.csv"), &field.v, MatrixKind::Rearranged)?;
    store_matrix(&cfg.out_file("variance.csv"), &variance, MatrixKind::Rearranged)?;

    let mut ellipses = Vec::with_capacity(s.points() * s.frames());
    for point in 0..s.points() {
        for frame in 0..s.frames() {
            ellipses.push(error_ellipse(&factors, sigma0, point, frame)?);
        }
    }
    write_json(&cfg.out_file("covariances.json"), &ellipses)?;
    write_text(&cfg.out_file("ellipses.csv"), &ellipse_csv(&ellipses))?;
    let summary = UqSummary {
        sigma0,
        rank,
        mean_variance: variance.mean(),
        max_variance: variance.max(),
    };
    write_json(&cfg.out_file("uq.json"), &summary)?;
    println!(
        "uq: rank={} mean variance={:.4e} max variance={:.4e}",
        rank, summary.mean_variance, summary.max_variance
    );
    Ok(())
}

fn mc(cfg: &RunConfig) -> CliResult<()> {
    let spec = cfg.scene_spec();
    let scene = generate(&spec)?;
    let mut runs = Vec::new();
    for mcfg in cfg.mc_configs()? {
        let rep = run_monte_carlo(&scene, &mcfg, &cfg.solver)?;
        let rec = RunRecord::from_report(&rep);
        println!(
            "mc: sigma0={} override={:?} coverage={:.4}±{:.4} error {:.6} -> {:.6}",
            mcfg.sigma0,
            mcfg.rank_override,
            rec.summary.coverage_mean,
            rec.summary.coverage_std,
            rec.summary.accuracy_original,
            rec.summary.accuracy_noise_aware
        );
        runs.push(rec);
    }
    let file = McReportFile {
        scene: Some(spec),
        solver: Some(cfg.solver.clone()),
        runs,
    };
    ensure_dir(&cfg.paths.output)?;
    write_json(&cfg.out_file("mc_report.json"), &file)?;
    write_report(&file, &cfg.paths.output)
}

#[derive(Serialize)]
struct FuseTiming<'a> {
    threads: Option<usize>,
    batch_secs: f64,
    segmented_sequential_secs: f64,
    segmented_parallel_wall_secs: f64,
    per_segment_secs: &'a [f64],
    batch_rank: usize,
    segment_ranks: &'a [usize],
    plan: &'a SegmentPlan,
}

fn fuse_cmd(cfg: &RunConfig, io: &TrackArgs) -> CliResult<()> {
    let sigma0 = cfg.single_sigma0()?;
    let threads = cfg.threads()?;
    let (w, r) = load_inputs(cfg, io)?;
    let plan = plan_segments(w.frames(), cfg.fusion.segments, cfg.fusion.overlap)?;
    let opts = RecoverOptions::default();

    let t0 = Instant::now();
    let batch = recover(&w, &r, sigma0, &cfg.solver, &opts)?;
    let batch_secs = t0.elapsed().as_secs_f64();
    let seg = run_segmented(&w, &r, sigma0, &cfg.solver, &opts, &plan, threads)?;

    let fused = seg.fused.rearranged();
    store_shape_pair(cfg, "fused", &fused)?;
    store_matrix(
        &cfg.out_file("fused_variance.csv"),
        &seg.fused.per_element_variance,
        MatrixKind::Rearranged,
    )?;
    store_matrix(&cfg.out_file("averaged.csv"), seg.averaged.shape.data(), MatrixKind::Shape)?;
    store_shape_pair(cfg, "batch", &batch.shape)?;
    store_matrix(&cfg.out_file("batch_variance.csv"), &batch.field.variance_matrix(), MatrixKind::Rearranged)?;
    let timing = FuseTiming {
        threads,
        batch_secs,
        segmented_sequential_secs: seg.timing.sequential_secs,
        segmented_parallel_wall_secs: seg.timing.parallel_wall_secs,
        per_segment_secs: &seg.timing.per_segment_secs,
        batch_rank: batch.rank,
        segment_ranks: &seg.ranks,
        plan: &seg.plan,
    };
    write_json(&cfg.out_file("timing.json"), &timing)?;
    let diff: DMatrix<f64> = fused.data() - batch.shape.data();
    println!(
        "fuse: {} segments of {} frames; batch {:.3}s, segmented {:.3}s sequential, {:.3}s wall; max |fused - batch| = {:.3e}",
        plan.count,
        plan.segment_length(),
        batch_secs,
        seg.timing.sequential_secs,
        seg.timing.parallel_wall_secs,
        diff.abs().max()
    );
    Ok(())
}

fn report(cfg: &RunConfig, reports: &[std::path::PathBuf]) -> CliResult<()> {
    let files = reports
        .iter()
        .map(|p| crate::io::read_json::<McReportFile>(p))
        .collect::<CliResult<Vec<_>>>()?;
    let merged = merge(files);
    if merged.runs.is_empty() {
        return Err(CliError::Config("reports contain no runs".into()));
    }
    write_report(&merged, &cfg.paths.output)?;
    println!("report: {} runs -> {}", merged.runs.len(), cfg.paths.output.display());
    Ok(())
}
