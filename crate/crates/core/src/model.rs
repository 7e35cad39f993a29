//! Matrix-shaped domain types shared by every stage of the pipeline.
//!
//! Layouts:
//!
//! * [`TrackMatrix`] is `2F x N`; rows `2i` and `2i+1` hold the image
//!   coordinates of all points in frame `i`.
//! * [`ShapeMatrix`] is `3F x N`; rows `3i..3i+3` hold the x, y, z
//!   coordinates of all points in frame `i`.
//! * [`RearrangedShape`] is `3N x F`; rows `0..N` are the x coordinates of
//!   points `0..N`, rows `N..2N` the y coordinates and rows `2N..3N` the z
//!   coordinates. Column `i` is frame `i`.
//!
//! The row-selection operators linking the two shape layouts are realized by
//! index arithmetic and never materialized.

use nalgebra::{DMatrix, Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Noisy `2F x N` observation matrix of 2D feature tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMatrix {
    data: DMatrix<f64>,
}

impl TrackMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % 2 != 0 {
            return Err(dim_err(format!(
                "track matrix needs 2F rows, got {}",
                data.nrows()
            )));
        }
        if data.ncols() == 0 {
            return Err(dim_err("track matrix has no points"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("track matrix has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows() / 2
    }

    pub fn points(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// Rows belonging to frames `start..end`.
    pub fn frame_range(&self, start: usize, end: usize) -> Result<TrackMatrix> {
        if start >= end || end > self.frames() {
            return Err(dim_err(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        TrackMatrix::new(self.data.rows(2 * start, 2 * (end - start)).clone_owned())
    }
}

/// Time-varying `3F x N` shape, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMatrix {
    data: DMatrix<f64>,
}

impl ShapeMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % 3 != 0 || data.ncols() == 0 {
            return Err(dim_err(format!(
                "shape matrix needs 3F x N with F,N >= 1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows() / 3
    }

    pub fn points(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// 3D position of `point` in `frame`.
    pub fn point(&self, frame: usize, point: usize) -> [f64; 3] {
        let r = 3 * frame;
        [
            self.data[(r, point)],
            self.data[(r + 1, point)],
            self.data[(r + 2, point)],
        ]
    }
}

/// The `3N x F` rearranged shape in `[all-X | all-Y | all-Z]` row blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RearrangedShape {
    data: DMatrix<f64>,
}

impl RearrangedShape {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % 3 != 0 || data.ncols() == 0 {
            return Err(dim_err(format!(
                "rearranged shape needs 3N x F with F,N >= 1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(points: usize, frames: usize) -> Self {
        Self {
            data: DMatrix::zeros(3 * points, frames),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn points(&self) -> usize {
        self.data.nrows() / 3
    }

    /// Largest rank a matrix of this size can have.
    pub fn max_rank(&self) -> usize {
        self.data.nrows().min(self.data.ncols())
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// Row index of coordinate `axis` (0 = x, 1 = y, 2 = z) of `point`.
    pub fn row_of(&self, point: usize, axis: usize) -> usize {
        axis * self.points() + point
    }
}

/// Per-frame `2 x 3` orthographic camera blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 6]>", into = "Vec<[f64; 6]>")]
pub struct RotationStack {
    blocks: Vec<Matrix2x3<f64>>,
}

impl RotationStack {
    pub fn new(blocks: Vec<Matrix2x3<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(dim_err("rotation stack is empty"));
        }
        for (i, b) in blocks.iter().enumerate() {
            let gram = b * b.transpose();
            let dev = (gram - nalgebra::Matrix2::identity()).abs().max();
            if !(dev <= ORTHONORMAL_TOL) {
                return Err(Error::Spec(format!(
                    "rotation block {i} is not row-orthonormal (deviation {dev:e})"
                )));
            }
        }
        Ok(Self { blocks })
    }

    /// Keeps the first two rows of each full rotation.
    pub fn from_rotations(rotations: &[Matrix3<f64>]) -> Result<Self> {
        Self::new(
            rotations
                .iter()
                .map(|r| r.fixed_rows::<2>(0).clone_owned())
                .collect(),
        )
    }

    pub fn frames(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, frame: usize) -> &Matrix2x3<f64> {
        &self.blocks[frame]
    }

    pub fn blocks(&self) -> &[Matrix2x3<f64>] {
        &self.blocks
    }

    pub fn frame_range(&self, start: usize, end: usize) -> Result<RotationStack> {
        if start >= end || end > self.frames() {
            return Err(dim_err(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        Ok(Self {
            blocks: self.blocks[start..end].to_vec(),
        })
    }
}

impl TryFrom<Vec<[f64; 6]>> for RotationStack {
    type Error = Error;

    fn try_from(rows: Vec<[f64; 6]>) -> Result<Self> {
        Self::new(rows.iter().map(|r| Matrix2x3::from_row_slice(r)).collect())
    }
}

impl From<RotationStack> for Vec<[f64; 6]> {
    fn from(stack: RotationStack) -> Self {
        stack
            .blocks
            .iter()
            .map(|b| [b[(0, 0)], b[(0, 1)], b[(0, 2)], b[(1, 0)], b[(1, 1)], b[(1, 2)]])
            .collect()
    }
}

/// I.i.d. Gaussian track noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma0: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma0: f64, seed: u64) -> Result<Self> {
        if !(sigma0 >= 0.0) || !sigma0.is_finite() {
            return Err(Error::Spec(format!("sigma0 must be >= 0, got {sigma0}")));
        }
        Ok(Self { sigma0, seed })
    }
}

/// `S -> S#`.
pub fn rearrange(s: &ShapeMatrix) -> RearrangedShape {
    let (f, n) = (s.frames(), s.points());
    let src = s.data();
    let data = DMatrix::from_fn(3 * n, f, |row, frame| {
        let (axis, point) = (row / n, row % n);
        src[(3 * frame + axis, point)]
    });
    RearrangedShape { data }
}

/// `S# -> S`.
pub fn inverse_rearrange(s_sharp: &RearrangedShape) -> ShapeMatrix {
    let (f, n) = (s_sharp.frames(), s_sharp.points());
    let src = s_sharp.data();
    let data = DMatrix::from_fn(3 * f, n, |row, point| {
        let (frame, axis) = (row / 3, row % 3);
        src[(axis * n + point, frame)]
    });
    ShapeMatrix { data }
}

/// `W = R S`, frame by frame.
pub fn project(r: &RotationStack, s: &ShapeMatrix) -> Result<TrackMatrix> {
    if r.frames() != s.frames() {
        return Err(dim_err(format!(
            "{} rotation blocks for {} shape frames",
            r.frames(),
            s.frames()
        )));
    }
    let n = s.points();
    let mut out = DMatrix::zeros(2 * s.frames(), n);
    for (i, block) in r.blocks().iter().enumerate() {
        let slice = s.data().rows(3 * i, 3);
        out.rows_mut(2 * i, 2).copy_from(&(block * slice));
    }
    TrackMatrix::new(out)
}

/// `R g^-1(S#)` evaluated directly on the rearranged layout.
pub fn project_rearranged(r: &RotationStack, s_sharp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = s_sharp.ncols();
    if r.frames() != f || s_sharp.nrows() % 3 != 0 {
        return Err(dim_err(format!(
            "{} rotation blocks for a {}x{} rearranged shape",
            r.frames(),
            s_sharp.nrows(),
            f
        )));
    }
    let n = s_sharp.nrows() / 3;
    let mut out = DMatrix::zeros(2 * f, n);
    for (i, b) in r.blocks().iter().enumerate() {
        let col = s_sharp.column(i);
        for j in 0..n {
            let (x, y, z) = (col[j], col[n + j], col[2 * n + j]);
            out[(2 * i, j)] = b[(0, 0)] * x + b[(0, 1)] * y + b[(0, 2)] * z;
            out[(2 * i + 1, j)] = b[(1, 0)] * x + b[(1, 1)] * y + b[(1, 2)] * z;
        }
    }
    Ok(out)
}

/// `g(R^T W)`: lifts a `2F x N` matrix into the rearranged `3N x F` layout.
pub fn back_project(r: &RotationStack, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != 2 * r.frames() {
        return Err(dim_err(format!(
            "{} rotation blocks for a {}-row track matrix",
            r.frames(),
            w.nrows()
        )));
    }
    let (f, n) = (r.frames(), w.ncols());
    let mut out = DMatrix::zeros(3 * n, f);
    for (i, b) in r.blocks().iter().enumerate() {
        for j in 0..n {
            let (u, v) = (w[(2 * i, j)], w[(2 * i + 1, j)]);
            for c in 0..3 {
                out[(c * n + j, i)] = b[(0, c)] * u + b[(1, c)] * v;
            }
        }
    }
    Ok(out)
}

/// Mean Euclidean distance between corresponding 3D points over all frames.
pub fn mean_3d_error(estimate: &ShapeMatrix, reference: &ShapeMatrix) -> Result<f64> {
    if estimate.data().shape() != reference.data().shape() {
        return Err(dim_err(format!(
            "shapes {:?} and {:?} differ",
            estimate.data().shape(),
            reference.data().shape()
        )));
    }
    let (f, n) = (estimate.frames(), estimate.points());
    let mut total = 0.0;
    for i in 0..f {
        for j in 0..n {
            let a = estimate.point(i, j);
            let b = reference.point(i, j);
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
    }
    Ok(total / (f * n) as f64)
}

/// Same metric on rearranged shapes.
pub fn mean_3d_error_rearranged(estimate: &RearrangedShape, reference: &RearrangedShape) -> Result<f64> {
    if estimate.data().shape() != reference.data().shape() {
        return Err(dim_err(format!(
            "shapes {:?} and {:?} differ",
            estimate.data().shape(),
            reference.data().shape()
        )));
    }
    let (a, b, n) = (estimate.data(), reference.data(), estimate.points());
    let mut total = 0.0;
    for i in 0..estimate.frames() {
        for j in 0..n {
            let dx = a[(j, i)] - b[(j, i)];
            let dy = a[(n + j, i)] - b[(n + j, i)];
            let dz = a[(2 * n + j, i)] - b[(2 * n + j, i)];
            total += (dx * dx + dy * dy + dz * dz).sqrt();
        }
    }
    Ok(total / (estimate.frames() * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rot(axis: nalgebra::Vector3<f64>, angle: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn rearrange_single_point() {
        let s = ShapeMatrix::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let s_sharp = rearrange(&s);
        assert_eq!(s_sharp.data(), &DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        assert_eq!(inverse_rearrange(&s_sharp), s);
    }

    #[test]
    fn rearrange_two_frames_one_point() {
        let s = ShapeMatrix::new(DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s_sharp = rearrange(&s);
        assert_eq!(s_sharp.data(), &expected);
        assert_eq!(inverse_rearrange(&RearrangedShape::new(expected).unwrap()), s);
    }

    #[test]
    fn rearrange_round_trip_5x4() {
        let s = ShapeMatrix::new(random(15, 4, 3)).unwrap();
        assert_eq!(inverse_rearrange(&rearrange(&s)), s);
        let s_sharp = RearrangedShape::new(random(12, 5, 4)).unwrap();
        assert_eq!(rearrange(&inverse_rearrange(&s_sharp)), s_sharp);
    }

    #[test]
    fn layout_positions() {
        let s = ShapeMatrix::new(random(3 * 4, 3, 9)).unwrap();
        let s_sharp = rearrange(&s);
        for frame in 0..4 {
            for point in 0..3 {
                for axis in 0..3 {
                    assert_eq!(
                        s_sharp.data()[(s_sharp.row_of(point, axis), frame)],
                        s.data()[(3 * frame + axis, point)]
                    );
                }
            }
        }
    }

    #[test]
    fn project_axis_aligned_keeps_xy() {
        let s = ShapeMatrix::new(random(9, 4, 1)).unwrap();
        let id = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let r = RotationStack::new(vec![id; 3]).unwrap();
        let w = project(&r, &s).unwrap();
        for i in 0..3 {
            assert_eq!(w.data().row(2 * i), s.data().row(3 * i));
            assert_eq!(w.data().row(2 * i + 1), s.data().row(3 * i + 1));
        }
    }

    #[test]
    fn project_coordinate_swap() {
        let s = ShapeMatrix::new(DMatrix::from_column_slice(3, 1, &[2.0, 3.0, 5.0])).unwrap();
        let r = RotationStack::new(vec![Matrix2x3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(project(&r, &s).unwrap().data().as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn project_matches_triple_loop() {
        let (f, n) = (3, 4);
        let s = ShapeMatrix::new(random(3 * f, n, 11)).unwrap();
        let rots: Vec<_> = (0..f)
            .map(|i| rot(nalgebra::Vector3::new(1.0, 2.0, 0.5 + i as f64), 0.3 + i as f64))
            .collect();
        let r = RotationStack::from_rotations(&rots).unwrap();
        let w = project(&r, &s).unwrap();
        for i in 0..f {
            for a in 0..2 {
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += rots[i][(a, c)] * s.data()[(3 * i + c, j)];
                    }
                    assert!((w.data()[(2 * i + a, j)] - acc).abs() < 1e-14);
                }
            }
        }
        let direct = project_rearranged(&r, rearrange(&s).data()).unwrap();
        assert!((direct - w.data()).norm() < 1e-14);
    }

    #[test]
    fn back_project_is_adjoint() {
        let (f, n) = (4, 5);
        let rots: Vec<_> = (0..f)
            .map(|i| rot(nalgebra::Vector3::new(0.3, -1.0, 0.7), 0.9 * i as f64))
            .collect();
        let r = RotationStack::from_rotations(&rots).unwrap();
        let s = random(3 * n, f, 5);
        let w = random(2 * f, n, 6);
        let lhs = project_rearranged(&r, &s).unwrap().dot(&w);
        let rhs = s.dot(&back_project(&r, &w).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn project_dimension_mismatch() {
        let s = ShapeMatrix::new(random(6, 2, 1)).unwrap();
        let r = RotationStack::new(vec![Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)]).unwrap();
        assert!(matches!(project(&r, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn rotation_stack_rejects_non_orthonormal() {
        let bad = Matrix2x3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0);
        assert!(matches!(RotationStack::new(vec![bad]), Err(Error::Spec(_))));
    }

    #[test]
    fn rotation_stack_row_round_trip() {
        let r = RotationStack::from_rotations(&[rot(nalgebra::Vector3::z(), 0.4)]).unwrap();
        let rows: Vec<[f64; 6]> = r.clone().into();
        assert_eq!(rows.len(), 1);
        assert_eq!(RotationStack::try_from(rows).unwrap(), r);
    }

    #[test]
    fn mean_error_cases() {
        let s = ShapeMatrix::new(random(6, 3, 2)).unwrap();
        assert_eq!(mean_3d_error(&s, &s).unwrap(), 0.0);

        let zero = ShapeMatrix::new(DMatrix::zeros(6, 3)).unwrap();
        let mut ones = DMatrix::zeros(6, 3);
        ones.row_mut(0).fill(1.0);
        ones.row_mut(3).fill(1.0);
        let unit = ShapeMatrix::new(ones).unwrap();
        assert!((mean_3d_error(&unit, &zero).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_error_matches_loop() {
        let a = ShapeMatrix::new(random(6, 3, 21)).unwrap();
        let b = ShapeMatrix::new(random(6, 3, 22)).unwrap();
        let mut dists = Vec::new();
        for frame in 0..2 {
            for p in 0..3 {
                let mut sq = 0.0;
                for c in 0..3 {
                    sq += (a.data()[(3 * frame + c, p)] - b.data()[(3 * frame + c, p)]).powi(2);
                }
                dists.push(sq.sqrt());
            }
        }
        let expected = dists.iter().sum::<f64>() / 6.0;
        assert!((mean_3d_error(&a, &b).unwrap() - expected).abs() < 1e-15);
        let via_sharp = mean_3d_error_rearranged(&rearrange(&a), &rearrange(&b)).unwrap();
        assert!((via_sharp - expected).abs() < 1e-15);
    }

    #[test]
    fn track_matrix_rejects_bad_input() {
        assert!(TrackMatrix::new(DMatrix::zeros(3, 2)).is_err());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = f64::INFINITY;
        assert!(TrackMatrix::new(m).is_err());
    }

    proptest! {
        #[test]
        fn rearrange_round_trip(f in 1usize..=20, n in 1usize..=20, seed in any::<u64>()) {
            let s = ShapeMatrix::new(random(3 * f, n, seed)).unwrap();
            prop_assert_eq!(inverse_rearrange(&rearrange(&s)), s);
            let s_sharp = RearrangedShape::new(random(3 * n, f, seed ^ 0x5a5a)).unwrap();
            prop_assert_eq!(rearrange(&inverse_rearrange(&s_sharp)), s_sharp);
        }

        #[test]
        fn project_is_linear(f in 1usize..=6, n in 1usize..=6, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let rots: Vec<_> = (0..f)
                .map(|i| rot(nalgebra::Vector3::new(1.0, 0.2 * i as f64, -0.4), 0.7 * i as f64 + 0.1))
                .collect();
            let r = RotationStack::from_rotations(&rots).unwrap();
            let s1 = random(3 * f, n, seed);
            let s2 = random(3 * f, n, seed.wrapping_add(1));
            let combo = ShapeMatrix::new(&s1 * a + &s2 * b).unwrap();
            let lhs = project(&r, &combo).unwrap().into_inner();
            let rhs = project(&r, &ShapeMatrix::new(s1).unwrap()).unwrap().into_inner() * a
                + project(&r, &ShapeMatrix::new(s2).unwrap()).unwrap().into_inner() * b;
            let scale = lhs.norm().max(rhs.norm()).max(1e-300);
            prop_assert!((lhs - rhs).norm() / scale < 1e-12 || (a == 0.0 && b == 0.0));
        }

        #[test]
        fn true_rotations_are_orthonormal(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..1.0, angle in -6.3f64..6.3) {
            let full = rot(nalgebra::Vector3::new(x, y, z), angle);
            let stack = RotationStack::from_rotations(&[full]).unwrap();
            let g = stack.block(0) * stack.block(0).transpose();
            prop_assert!((g - nalgebra::Matrix2::identity()).abs().max() < 1e-10);
        }
    }
}
