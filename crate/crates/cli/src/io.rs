//! Matrix CSV files with JSON manifests, rotation stacks and JSON helpers.
//!
//! A matrix file `name.csv` holds one matrix row per line, comma-separated,
//! without a header. Its manifest `name.manifest.json` records
//! `{"frames": F, "points": N, "kind": "tracks" | "shape" | "rearranged"}`.
//! Values are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nrsfm_uq::{RearrangedShape, RotationStack, ShapeMatrix, TrackMatrix};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// `2F x N` image tracks.
    Tracks,
    /// `3F x N` frame-major shape.
    Shape,
    /// `3N x F` rearranged shape or any per-element field in that layout.
    Rearranged,
}

impl MatrixKind {
    pub fn dims(self, frames: usize, points: usize) -> (usize, usize) {
        match self {
            MatrixKind::Tracks => (2 * frames, points),
            MatrixKind::Shape => (3 * frames, points),
            MatrixKind::Rearranged => (3 * points, frames),
        }
    }

    /// Inverse of [`MatrixKind::dims`]; `None` when the row count does not fit.
    pub fn frames_points(self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        match self {
            MatrixKind::Tracks if rows % 2 == 0 => Some((rows / 2, cols)),
            MatrixKind::Shape if rows % 3 == 0 => Some((rows / 3, cols)),
            MatrixKind::Rearranged if rows % 3 == 0 => Some((cols, rows / 3)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub points: usize,
    pub kind: MatrixKind,
}

/// `dir/stem.csv` -> `dir/stem.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.manifest.json"))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => CliError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {expected_len} fields, found {len}"),
        },
        other => CliError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

pub fn read_csv(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut cols = 0usize;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(rows as u64 + 1, |p| p.line());
        for tok in rec.iter() {
            let x: f64 = tok.parse().map_err(|_| CliError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("not a number: {tok:?}"),
            })?;
            values.push(x);
        }
        cols = rec.len();
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty matrix".into(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| format!("{x:.16e}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `m` and its manifest.
pub fn store_matrix(path: &Path, m: &DMatrix<f64>, kind: MatrixKind) -> CliResult<Manifest> {
    let (frames, points) = kind
        .frames_points(m.nrows(), m.ncols())
        .ok_or_else(|| CliError::manifest(path, format!("{}x{} is not a {kind:?} matrix", m.nrows(), m.ncols())))?;
    let manifest = Manifest { frames, points, kind };
    write_csv(path, m)?;
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

/// Reads a matrix and checks it against its manifest.
pub fn load_matrix(path: &Path) -> CliResult<(DMatrix<f64>, Manifest)> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(CliError::manifest(path, format!("missing manifest {}", mpath.display())));
    }
    let manifest: Manifest = read_json(&mpath)?;
    let m = read_csv(path)?;
    let expected = manifest.kind.dims(manifest.frames, manifest.points);
    if m.shape() != expected {
        return Err(CliError::manifest(
            path,
            format!(
                "{:?} with frames={} points={} needs {}x{}, file has {}x{}",
                manifest.kind,
                manifest.frames,
                manifest.points,
                expected.0,
                expected.1,
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    Ok((m, manifest))
}

fn expect_kind(path: &Path, got: MatrixKind, want: &[MatrixKind]) -> CliResult<()> {
    if want.contains(&got) {
        Ok(())
    } else {
        Err(CliError::manifest(path, format!("kind {got:?}, expected one of {want:?}")))
    }
}

pub fn load_tracks(path: &Path) -> CliResult<TrackMatrix> {
    let (m, man) = load_matrix(path)?;
    expect_kind(path, man.kind, &[MatrixKind::Tracks])?;
    Ok(TrackMatrix::new(m)?)
}

pub fn store_tracks(path: &Path, w: &TrackMatrix) -> CliResult<Manifest> {
    store_matrix(path, w.data(), MatrixKind::Tracks)
}

/// Loads a shape in either layout and returns it rearranged.
pub fn load_shape(path: &Path) -> CliResult<RearrangedShape> {
    let (m, man) = load_matrix(path)?;
    match man.kind {
        MatrixKind::Rearranged => Ok(RearrangedShape::new(m)?),
        MatrixKind::Shape => Ok(nrsfm_uq::rearrange(&ShapeMatrix::new(m)?)),
        MatrixKind::Tracks => Err(CliError::manifest(path, "expected a shape, found tracks")),
    }
}

pub fn load_rotations(path: &Path) -> CliResult<RotationStack> {
    let rows: Vec<[f64; 6]> = read_json(path)?;
    Ok(RotationStack::try_from(rows)?)
}

pub fn store_rotations(path: &Path, r: &RotationStack) -> CliResult<()> {
    write_json(path, r)
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
