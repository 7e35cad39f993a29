//! Low-rank non-rigid shape recovery with closed-form element-wise uncertainty.

pub mod error;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rankselect;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
pub use model::{
    back_project, inverse_rearrange, mean_3d_error, mean_3d_error_rearranged, project, project_rearranged,
    rearrange, NoiseModel, RearrangedShape, RotationStack, ShapeMatrix, TrackMatrix,
};
