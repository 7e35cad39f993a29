//! Overlapping sub-sequence recovery and uncertainty-weighted fusion.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{inverse_rearrange, RearrangedShape, RotationStack, ShapeMatrix, TrackMatrix};
use crate::pipeline::{recover, RecoverOptions, Recovery};
use crate::solver::{SolveReport, SolverConfig};
use crate::uncertainty::UncertaintyField;

pub const DEFAULT_SEGMENTS: usize = 6;
pub const DEFAULT_OVERLAP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub frames: usize,
    /// Half-open frame ranges `[start, end)`.
    pub segments: Vec<(usize, usize)>,
    pub overlap_fraction: f64,
    pub count: usize,
}

impl SegmentPlan {
    pub fn segment_length(&self) -> usize {
        self.segments.first().map_or(0, |(s, e)| e - s)
    }

    /// Minimum number of shared frames between consecutive segments.
    pub fn min_overlap(&self) -> usize {
        (self.overlap_fraction * self.segment_length() as f64).ceil() as usize
    }
}

/// Equal-length segments with at least `ceil(overlap * L)` shared frames,
/// using the shortest length `L` that reaches frame `F`.
pub fn plan_segments(frames: usize, count: usize, overlap: f64) -> Result<SegmentPlan> {
    if count == 0 {
        return Err(Error::Spec("segment count must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Spec(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if frames < 2 {
        return Err(Error::Spec(format!("{frames} frames cannot form a segment of length 2")));
    }
    if count == 1 {
        return Ok(SegmentPlan {
            frames,
            segments: vec![(0, frames)],
            overlap_fraction: overlap,
            count,
        });
    }
    let len = (2..=frames)
        .find(|&l| {
            let o = (overlap * l as f64).ceil() as usize;
            o < l && count * l - (count - 1) * o >= frames
        })
        .ok_or_else(|| Error::Spec(format!("{count} segments with overlap {overlap} cannot cover {frames} frames")))?;
    if frames - len < count - 1 {
        return Err(Error::Spec(format!(
            "{frames} frames too short for {count} distinct segments of length {len}"
        )));
    }
    let span = (frames - len) as f64 / (count - 1) as f64;
    let segments = (0..count)
        .map(|i| {
            let start = (i as f64 * span).round() as usize;
            (start, start + len)
        })
        .collect();
    Ok(SegmentPlan {
        frames,
        segments,
        overlap_fraction: overlap,
        count,
    })
}

/// One segment's estimate in segment-local frame indices.
#[derive(Debug, Clone)]
pub struct SegmentEstimate {
    pub range: (usize, usize),
    pub shape: RearrangedShape,
    pub field: UncertaintyField,
}

#[derive(Debug, Clone)]
pub struct FusedResult {
    pub shape: ShapeMatrix,
    /// Same layout as the rearranged shape (`3N x F`).
    pub per_element_variance: DMatrix<f64>,
    pub per_segment_reports: Vec<SolveReport>,
}

impl FusedResult {
    pub fn rearranged(&self) -> RearrangedShape {
        crate::model::rearrange(&self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRule {
    InverseVariance,
    Average,
}

fn collect_contributors(segments: &[SegmentEstimate], frames: usize) -> Result<(usize, Vec<Vec<(usize, usize)>>)> {
    let rows = segments
        .first()
        .map(|s| s.shape.data().nrows())
        .ok_or_else(|| Error::Spec("no segments to fuse".into()))?;
    let mut by_frame: Vec<Vec<(usize, usize)>> = vec![Vec::new(); frames];
    for (k, seg) in segments.iter().enumerate() {
        let (start, end) = seg.range;
        if end <= start || end > frames {
            return Err(Error::Spec(format!("segment range {start}..{end} invalid for {frames} frames")));
        }
        if seg.shape.data().nrows() != rows || seg.shape.frames() != end - start {
            return Err(dim_err(format!(
                "segment {k} shape {:?} does not match range {start}..{end} with {rows} rows",
                seg.shape.data().shape()
            )));
        }
        if seg.field.v.shape() != seg.shape.data().shape() {
            return Err(dim_err(format!("segment {k} uncertainty shape differs from its estimate")));
        }
        for (local, g) in (start..end).enumerate() {
            by_frame[g].push((k, local));
        }
    }
    if let Some(start) = by_frame.iter().position(|c| c.is_empty()) {
        let end = by_frame[start..]
            .iter()
            .position(|c| !c.is_empty())
            .map_or(frames, |p| start + p);
        return Err(Error::Coverage { start, end });
    }
    Ok((rows, by_frame))
}

fn fuse_with(segments: &[SegmentEstimate], frames: usize, rule: FusionRule) -> Result<FusedResult> {
    let (rows, by_frame) = collect_contributors(segments, frames)?;
    let mut value = DMatrix::zeros(rows, frames);
    let mut var = DMatrix::zeros(rows, frames);
    let mut discrepancy = (0.0, 0usize);
    for (g, contributors) in by_frame.iter().enumerate() {
        for row in 0..rows {
            let items: Vec<(f64, f64)> = contributors
                .iter()
                .map(|&(k, l)| (segments[k].shape.data()[(row, l)], segments[k].field.variance(row, l)))
                .collect();
            if let [(a, va), (b, vb), ..] = items[..] {
                if va + vb > 0.0 {
                    discrepancy.0 += (a - b).abs() / (va + vb).sqrt();
                    discrepancy.1 += 1;
                }
            }
            let (x, v) = match rule {
                _ if items.len() == 1 => items[0],
                FusionRule::InverseVariance => inverse_variance(&items),
                FusionRule::Average => {
                    let n = items.len() as f64;
                    (
                        items.iter().map(|p| p.0).sum::<f64>() / n,
                        items.iter().map(|p| p.1).sum::<f64>() / (n * n),
                    )
                }
            };
            value[(row, g)] = x;
            var[(row, g)] = v;
        }
    }
    if discrepancy.1 > 0 {
        let mean = discrepancy.0 / discrepancy.1 as f64;
        if mean > 5.0 {
            log::warn!("segments disagree on overlaps: mean discrepancy {mean:.2} pooled sigma");
        }
    }
    Ok(FusedResult {
        shape: inverse_rearrange(&RearrangedShape::new(value)?),
        per_element_variance: var,
        per_segment_reports: Vec::new(),
    })
}

/// `(value, variance)` of the inverse-variance combination. Exact (zero-variance)
/// contributors take precedence and are averaged among themselves.
pub fn inverse_variance(items: &[(f64, f64)]) -> (f64, f64) {
    if let [single] = items {
        return *single;
    }
    let exact: Vec<f64> = items.iter().filter(|p| p.1 == 0.0).map(|p| p.0).collect();
    if !exact.is_empty() {
        return (exact.iter().sum::<f64>() / exact.len() as f64, 0.0);
    }
    let wsum: f64 = items.iter().map(|p| 1.0 / p.1).sum();
    let x = items.iter().map(|p| p.0 / p.1).sum::<f64>() / wsum;
    (x, 1.0 / wsum)
}

pub fn fuse(segments: &[SegmentEstimate], frames: usize) -> Result<FusedResult> {
    fuse_with(segments, frames, FusionRule::InverseVariance)
}

/// Plain average over contributing segments.
pub fn fuse_average(segments: &[SegmentEstimate], frames: usize) -> Result<FusedResult> {
    fuse_with(segments, frames, FusionRule::Average)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTiming {
    pub per_segment_secs: Vec<f64>,
    /// Sum of per-segment times.
    pub sequential_secs: f64,
    /// Wall time of the concurrent run.
    pub parallel_wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SegmentedRun {
    pub plan: SegmentPlan,
    pub fused: FusedResult,
    pub averaged: FusedResult,
    pub ranks: Vec<usize>,
    pub timing: SegmentTiming,
}

fn thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    match threads {
        Some(0) => Err(Error::Spec("threads must be >= 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map(Some)
            .map_err(|e| Error::Spec(format!("thread pool: {e}"))),
        None => Ok(None),
    }
}

/// Recovers every segment of `plan` concurrently and fuses the results.
pub fn run_segmented(
    w: &TrackMatrix,
    r: &RotationStack,
    sigma0: f64,
    solver: &SolverConfig,
    opts: &RecoverOptions,
    plan: &SegmentPlan,
    threads: Option<usize>,
) -> Result<SegmentedRun> {
    if plan.frames != w.frames() || r.frames() != w.frames() {
        return Err(dim_err(format!(
            "plan covers {} frames, tracks have {}, rotations {}",
            plan.frames,
            w.frames(),
            r.frames()
        )));
    }
    let work = || -> Result<Vec<(Recovery, f64)>> {
        plan.segments
            .par_iter()
            .map(|&(s, e)| {
                let t0 = Instant::now();
                let rec = recover(&w.frame_range(s, e)?, &r.frame_range(s, e)?, sigma0, solver, opts)?;
                Ok((rec, t0.elapsed().as_secs_f64()))
            })
            .collect()
    };
    let t0 = Instant::now();
    let results = match thread_pool(threads)? {
        Some(pool) => pool.install(work),
        None => work(),
    }?;
    let parallel_wall_secs = t0.elapsed().as_secs_f64();

    let per_segment_secs: Vec<f64> = results.iter().map(|(_, t)| *t).collect();
    let ranks = results.iter().map(|(rec, _)| rec.rank).collect();
    let estimates: Vec<SegmentEstimate> = plan
        .segments
        .iter()
        .zip(results.iter())
        .map(|(&range, (rec, _))| SegmentEstimate {
            range,
            shape: rec.shape.clone(),
            field: rec.field.clone(),
        })
        .collect();
    let mut fused = fuse(&estimates, plan.frames)?;
    fused.per_segment_reports = results.iter().map(|(rec, _)| rec.solve.clone()).collect();
    let averaged = fuse_average(&estimates, plan.frames)?;
    Ok(SegmentedRun {
        plan: plan.clone(),
        fused,
        averaged,
        ranks,
        timing: SegmentTiming {
            sequential_secs: per_segment_secs.iter().sum(),
            per_segment_secs,
            parallel_wall_secs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rearrange;
    use proptest::prelude::*;

    #[test]
    fn single_segment() {
        let p = plan_segments(10, 1, 0.2).unwrap();
        assert_eq!(p.segments, vec![(0, 10)]);
    }

    #[test]
    fn two_segments_of_hundred() {
        let p = plan_segments(100, 2, 0.2).unwrap();
        // Smallest L with 2L - ceil(0.2 L) >= 100 is 56, sharing 12 frames.
        assert_eq!(p.segments, vec![(0, 56), (44, 100)]);
        assert_eq!(p.min_overlap(), 12);
    }

    #[test]
    fn infeasible_plans() {
        assert!(matches!(plan_segments(5, 6, 0.2), Err(Error::Spec(_))));
        assert!(matches!(plan_segments(10, 0, 0.2), Err(Error::Spec(_))));
        assert!(matches!(plan_segments(10, 2, 1.0), Err(Error::Spec(_))));
        assert!(matches!(plan_segments(1, 1, 0.2), Err(Error::Spec(_))));
    }

    proptest! {
        #[test]
        fn plan_invariants(frames in 2usize..400, count in 1usize..10, overlap in 0.0f64..0.9) {
            if let Ok(p) = plan_segments(frames, count, overlap) {
                prop_assert_eq!(p.segments.len(), count);
                prop_assert_eq!(p.segments[0].0, 0);
                prop_assert_eq!(p.segments[count - 1].1, frames);
                let len = p.segment_length();
                prop_assert!(len >= 2);
                for w in p.segments.windows(2) {
                    prop_assert_eq!(w[1].1 - w[1].0, len);
                    prop_assert!(w[1].0 > w[0].0);
                    prop_assert!(w[0].1 >= w[1].0 + p.min_overlap());
                }
            }
        }
    }

    fn estimate(range: (usize, usize), rows: usize, value: f64, var: f64) -> SegmentEstimate {
        let cols = range.1 - range.0;
        SegmentEstimate {
            range,
            shape: RearrangedShape::new(DMatrix::from_element(rows, cols, value)).unwrap(),
            field: UncertaintyField {
                v: DMatrix::from_element(rows, cols, var / 1.5),
                sigma0: 1.0,
            },
        }
    }

    #[test]
    fn equal_estimates_halve_variance() {
        let segs = [estimate((0, 6), 3, 0.7, 0.2), estimate((4, 10), 3, 0.7, 0.2)];
        let f = fuse(&segs, 10).unwrap();
        let s = f.rearranged();
        for g in 0..10 {
            assert!((s.data()[(0, g)] - 0.7).abs() < 1e-15);
            let expected = if (4..6).contains(&g) { 0.1 } else { 0.2 };
            assert!((f.per_element_variance[(0, g)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_values_and_exact_dominance() {
        let (x, v) = inverse_variance(&[(1.0, 1.0), (4.0, 2.0)]);
        assert!((x - 2.0).abs() < 1e-15 && (v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(inverse_variance(&[(1.0, 0.0), (4.0, 2.0)]), (1.0, 0.0));
        assert_eq!(inverse_variance(&[(3.0, 5.0)]), (3.0, 5.0));
    }

    #[test]
    fn gap_is_reported() {
        let segs = [estimate((0, 4), 3, 0.0, 1.0), estimate((6, 10), 3, 0.0, 1.0)];
        assert!(matches!(fuse(&segs, 10), Err(Error::Coverage { start: 4, end: 6 })));
        assert!(matches!(fuse(&segs[..1], 10), Err(Error::Coverage { start: 4, end: 10 })));
    }

    #[test]
    fn self_fusion_is_identity_on_values() {
        let mut rng_val = 0.0f64;
        let shape = DMatrix::from_fn(6, 8, |_, _| {
            rng_val += 0.37;
            rng_val.sin()
        });
        let seg = SegmentEstimate {
            range: (0, 8),
            shape: RearrangedShape::new(shape.clone()).unwrap(),
            field: UncertaintyField {
                v: DMatrix::from_fn(6, 8, |i, j| 0.1 + 0.01 * (i + j) as f64),
                sigma0: 0.3,
            },
        };
        let f = fuse(&[seg.clone(), seg.clone()], 8).unwrap();
        assert!((rearrange(&f.shape).data() - &shape).abs().max() < 1e-15);
        let halved = seg.field.variance_matrix() / 2.0;
        assert!((&f.per_element_variance - halved).abs().max() < 1e-15);
    }

    proptest! {
        #[test]
        fn fused_variance_identity(vars in prop::collection::vec(1e-6f64..10.0, 1..6), vals in prop::collection::vec(-5.0f64..5.0, 6)) {
            let items: Vec<(f64, f64)> = vars.iter().zip(vals.iter()).map(|(v, x)| (*x, *v)).collect();
            let (x, v) = inverse_variance(&items);
            let inv: f64 = vars.iter().map(|v| 1.0 / v).sum();
            prop_assert!((v - 1.0 / inv).abs() <= 1e-12 * v);
            prop_assert!(v <= vars.iter().cloned().fold(f64::INFINITY, f64::min) * (1.0 + 1e-12));
            let lo = items.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = items.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}
