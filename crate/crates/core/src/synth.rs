//! Synthetic deforming scenes observed by an orbiting orthographic camera.
//!
//! The ground-truth rearranged shape is `A * B^T` with a `3N x r` spatial
//! factor `A` and an `F x r` temporal factor `B` whose columns are DCT-II
//! cosines `cos(pi k (f + 1/2) / F)`, `k = 0..r`. Column 0 is constant and
//! carries the mean shape, so a global translation never raises the rank.
//! Deformation modes `k >= 1` have geometrically decaying amplitude.
//!
//! When `3r <= N` the spatial factor is built so that its x, y and z blocks
//! are mutually orthogonal with equal Gram matrices. A centered scene then
//! carries the same information along every axis, which is the regime the
//! closed-form variance assumes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    inverse_rearrange, project, NoiseModel, RearrangedShape, RotationStack, ShapeMatrix,
    TrackMatrix,
};

/// Camera elevation at which the orbit-averaged projector is `(2/3) I`.
pub fn isotropic_elevation() -> f64 {
    (1.0 / 2f64.sqrt()).atan()
}

fn default_revolutions() -> f64 {
    3.0
}

fn default_elevation() -> f64 {
    isotropic_elevation()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    pub points: usize,
    pub true_rank: usize,
    /// Camera angular travel over the whole sequence, in revolutions.
    #[serde(default = "default_revolutions")]
    pub orbit_revolutions: f64,
    /// Camera elevation above the orbit plane, radians.
    #[serde(default = "default_elevation")]
    pub elevation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Map all coordinates into `[0, 1]` with one global affine map.
    /// Otherwise the scene is only scaled to unit coordinate range.
    #[serde(default)]
    pub normalize: bool,
}

impl SceneSpec {
    pub fn new(frames: usize, points: usize, true_rank: usize, seed: u64) -> Self {
        Self {
            frames,
            points,
            true_rank,
            orbit_revolutions: default_revolutions(),
            elevation: default_elevation(),
            seed,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points == 0 {
            return Err(Error::Spec("scene needs at least one frame and one point".into()));
        }
        let max_rank = (3 * self.points).min(self.frames);
        if self.true_rank == 0 || self.true_rank > max_rank {
            return Err(Error::Spec(format!(
                "true rank {} outside 1..={max_rank}",
                self.true_rank
            )));
        }
        if !self.orbit_revolutions.is_finite() || !self.elevation.is_finite() {
            return Err(Error::Spec("orbit parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub shape_gt: ShapeMatrix,
    pub rotations: RotationStack,
    pub tracks_clean: TrackMatrix,
}

impl SyntheticScene {
    pub fn shape_gt_rearranged(&self) -> RearrangedShape {
        crate::model::rearrange(&self.shape_gt)
    }
}

fn mode_amplitude(k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        0.8 * 0.5f64.powi(k as i32 - 1)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn spatial_factor(rng: &mut ChaCha8Rng, points: usize, rank: usize) -> DMatrix<f64> {
    let n = points;
    let mut a = DMatrix::zeros(3 * n, rank);
    if 3 * rank <= n {
        let q = gaussian_matrix(rng, n, 3 * rank).qr().q();
        for axis in 0..3 {
            for k in 0..rank {
                let col = q.column(axis * rank + k) * mode_amplitude(k);
                a.view_mut((axis * n, k), (n, 1)).copy_from(&col);
            }
        }
    } else {
        let q = gaussian_matrix(rng, 3 * n, rank).qr().q();
        for k in 0..rank {
            a.set_column(k, &(q.column(k) * mode_amplitude(k)));
        }
    }
    a
}

fn temporal_factor(frames: usize, rank: usize) -> DMatrix<f64> {
    DMatrix::from_fn(frames, rank, |f, k| {
        (PI * k as f64 * (f as f64 + 0.5) / frames as f64).cos()
    })
}

/// Full camera rotations for a Z-axis orbit; rows are image x, image y and
/// the viewing direction.
pub fn orbit_rotations(frames: usize, revolutions: f64, elevation: f64) -> Vec<Matrix3<f64>> {
    let step = 2.0 * PI * revolutions / frames as f64;
    (0..frames)
        .map(|f| {
            let theta = step * f as f64;
            let (st, ct) = theta.sin_cos();
            let (se, ce) = elevation.sin_cos();
            let view = Vector3::new(ce * ct, ce * st, se);
            let horiz = Vector3::new(-st, ct, 0.0);
            let vert = view.cross(&horiz);
            Matrix3::from_rows(&[horiz.transpose(), vert.transpose(), view.transpose()])
        })
        .collect()
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spatial_factor(&mut rng, spec.points, spec.true_rank);
    let b = temporal_factor(spec.frames, spec.true_rank);
    let mut s_sharp = a * b.transpose();

    let lo = s_sharp.min();
    let hi = s_sharp.max();
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::Numerical("generated shape has zero extent".into()));
    }
    if spec.normalize {
        s_sharp.apply(|x| *x = (*x - lo) / span);
        // rounding can leave 1 + ulp
        s_sharp.apply(|x| *x = x.clamp(0.0, 1.0));
    } else {
        s_sharp /= span;
    }

    let shape_gt = inverse_rearrange(&RearrangedShape::new(s_sharp)?);
    let rotations = RotationStack::from_rotations(&orbit_rotations(
        spec.frames,
        spec.orbit_revolutions,
        spec.elevation,
    ))?;
    let tracks_clean = project(&rotations, &shape_gt)?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        shape_gt,
        rotations,
        tracks_clean,
    })
}

/// `W = W* + E` with `E_ij ~ N(0, sigma0^2)` i.i.d., drawn column-major.
pub fn add_noise(tracks: &TrackMatrix, noise: &NoiseModel) -> TrackMatrix {
    if noise.sigma0 == 0.0 {
        return tracks.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut data = tracks.data().clone();
    for x in data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += noise.sigma0 * z;
    }
    TrackMatrix::new(data).expect("finite tracks plus finite noise stay finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;
    use crate::model::rearrange;

    #[test]
    fn rank_one_columns_are_parallel() {
        let scene = generate(&SceneSpec::new(4, 2, 1, 3)).unwrap();
        let s = scene.shape_gt_rearranged().into_inner();
        let c0 = s.column(0);
        for j in 1..4 {
            let c = s.column(j);
            let cos = c.dot(&c0) / (c.norm() * c0.norm());
            assert!((cos.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::new(20, 6, 2, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.shape_gt, b.shape_gt);
        assert_eq!(a.rotations, b.rotations);
        assert_eq!(a.tracks_clean, b.tracks_clean);
        let c = generate(&SceneSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.shape_gt, c.shape_gt);
    }

    #[test]
    fn exact_rank_three() {
        let scene = generate(&SceneSpec::new(50, 10, 3, 1)).unwrap();
        let s = singular_values(scene.shape_gt_rearranged().data()).unwrap();
        for k in 3..s.len() {
            assert!(s[k] < 1e-10 * s[0], "sigma_{} = {}", k + 1, s[k]);
        }
        assert!(s[2] > 1e-3 * s[0]);
    }

    #[test]
    fn exact_rank_without_isotropic_layout() {
        // 3r > N takes the generic branch
        let mut spec = SceneSpec::new(30, 3, 4, 2);
        spec.normalize = true;
        let scene = generate(&spec).unwrap();
        let s = singular_values(scene.shape_gt_rearranged().data()).unwrap();
        assert!(s[3] > 1e-6 * s[0]);
        for k in 4..s.len() {
            assert!(s[k] < 1e-10 * s[0]);
        }
    }

    #[test]
    fn normalized_scene_in_unit_box() {
        let mut spec = SceneSpec::new(40, 8, 2, 5);
        spec.normalize = true;
        let scene = generate(&spec).unwrap();
        let d = scene.shape_gt.data();
        assert!(d.min() >= 0.0 && d.max() <= 1.0);
        assert!(d.min() < 1e-12 && d.max() > 1.0 - 1e-12);
        let s = singular_values(rearrange(&scene.shape_gt).data()).unwrap();
        assert!(s[2] < 1e-10 * s[0]);
    }

    #[test]
    fn clean_tracks_are_projection() {
        let scene = generate(&SceneSpec::new(12, 5, 2, 9)).unwrap();
        assert_eq!(
            project(&scene.rotations, &scene.shape_gt).unwrap(),
            scene.tracks_clean
        );
    }

    #[test]
    fn orbit_blocks_orthonormal_and_proper() {
        for r in orbit_rotations(17, 1.3, 0.4) {
            assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_elevation_averages_to_two_thirds() {
        let rots = orbit_rotations(360, 1.0, isotropic_elevation());
        let mut acc = Matrix3::zeros();
        for r in &rots {
            let p = r.fixed_rows::<2>(0).transpose() * r.fixed_rows::<2>(0);
            acc += p;
        }
        acc /= rots.len() as f64;
        assert!((acc - Matrix3::identity() * (2.0 / 3.0)).abs().max() < 1e-12);
    }

    #[test]
    fn invalid_rank_rejected() {
        assert!(matches!(generate(&SceneSpec::new(5, 2, 6, 0)), Err(Error::Spec(_))));
        assert!(matches!(generate(&SceneSpec::new(5, 2, 0, 0)), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_noise_is_identity() {
        let scene = generate(&SceneSpec::new(6, 3, 1, 0)).unwrap();
        let w = add_noise(&scene.tracks_clean, &NoiseModel::new(0.0, 1).unwrap());
        assert_eq!(w, scene.tracks_clean);
    }

    #[test]
    fn noise_deterministic_per_seed() {
        let scene = generate(&SceneSpec::new(6, 3, 1, 0)).unwrap();
        let n = NoiseModel::new(0.1, 42).unwrap();
        assert_eq!(add_noise(&scene.tracks_clean, &n), add_noise(&scene.tracks_clean, &n));
    }

    #[test]
    fn noise_moments_at_one_million_entries() {
        let tracks = TrackMatrix::new(DMatrix::zeros(2 * 500, 1000)).unwrap();
        let w = add_noise(&tracks, &NoiseModel::new(0.05, 11).unwrap());
        let n = w.data().len() as f64;
        let mean = w.data().sum() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 1e-3 * 0.05 * 10.0);
        assert!((var / 0.0025 - 1.0).abs() < 0.01, "variance {var}");
    }
}
