use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use nrsfm_uq_cli::io::{load_matrix, load_rotations, load_shape, load_tracks, read_csv, store_matrix, write_csv, MatrixKind};
use nrsfm_uq_cli::CliError;
use tempfile::tempdir;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut s = seed;
    DMatrix::from_fn(rows, cols, |_, _| {
        let u = (splitmix(&mut s) >> 11) as f64 / (1u64 << 53) as f64;
        let e = (splitmix(&mut s) % 40) as i32 - 20;
        (2.0 * u - 1.0) * 10f64.powi(e)
    })
}

fn write_manifest(path: &Path, frames: usize, points: usize, kind: &str) {
    let m = path.with_file_name(format!(
        "{}.manifest.json",
        path.file_stem().unwrap().to_string_lossy()
    ));
    fs::write(m, format!(r#"{{"frames":{frames},"points":{points},"kind":"{kind}"}}"#)).unwrap();
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut m = random_matrix(6, 4, 42);
    m[(0, 0)] = -0.0;
    m[(1, 1)] = f64::MIN_POSITIVE;
    m[(2, 2)] = f64::MAX;
    m[(3, 3)] = 0.1 + 0.2;
    store_matrix(&path, &m, MatrixKind::Tracks).unwrap();
    let (back, man) = load_matrix(&path).unwrap();
    assert_eq!((man.frames, man.points), (3, 4));
    for (a, b) in m.iter().zip(back.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn round_trip_many_random_matrices() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.csv");
    for seed in 0..50 {
        let m = random_matrix(6, 4, seed);
        write_csv(&path, &m).unwrap();
        let back = read_csv(&path).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn bad_token_reports_its_line() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.csv");
    fs::write(&path, "1,2,3\n4,5,6\n7,abc,9\n1,1,1\n").unwrap();
    match read_csv(&path) {
        Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn ragged_row_reports_its_line() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.csv");
    fs::write(&path, "1,2\n3,4\n5,6\n7\n").unwrap();
    match read_csv(&path) {
        Err(CliError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn manifest_frame_count_mismatch() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.csv");
    write_csv(&path, &random_matrix(8, 3, 1)).unwrap();
    write_manifest(&path, 5, 3, "tracks");
    assert!(matches!(load_tracks(&path), Err(CliError::Manifest { .. })));
}

#[test]
fn missing_manifest_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.csv");
    write_csv(&path, &random_matrix(4, 3, 1)).unwrap();
    assert!(matches!(load_tracks(&path), Err(CliError::Manifest { .. })));
}

#[test]
fn wrong_kind_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("s.csv");
    store_matrix(&path, &random_matrix(6, 3, 1), MatrixKind::Shape).unwrap();
    assert!(matches!(load_tracks(&path), Err(CliError::Manifest { .. })));
    let t = dir.path().join("t.csv");
    store_matrix(&t, &random_matrix(6, 3, 1), MatrixKind::Tracks).unwrap();
    assert!(matches!(load_shape(&t), Err(CliError::Manifest { .. })));
}

#[test]
fn shape_layouts_load_to_same_rearranged_matrix() {
    let dir = tempdir().unwrap();
    let shape = random_matrix(12, 5, 9);
    let a = dir.path().join("shape.csv");
    store_matrix(&a, &shape, MatrixKind::Shape).unwrap();
    let sharp = nrsfm_uq::rearrange(&nrsfm_uq::ShapeMatrix::new(shape).unwrap());
    let b = dir.path().join("sharp.csv");
    store_matrix(&b, sharp.data(), MatrixKind::Rearranged).unwrap();
    assert_eq!(load_shape(&a).unwrap(), load_shape(&b).unwrap());
}

#[test]
fn rotations_json_layout() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("r.json");
    fs::write(&path, "[[1,0,0,0,1,0],[0,1,0,0,0,1]]").unwrap();
    let r = load_rotations(&path).unwrap();
    assert_eq!(r.frames(), 2);
    assert_eq!(r.block(1)[(0, 1)], 1.0);
    fs::write(&path, "[[1,0,0,1,0,0]]").unwrap();
    assert!(matches!(load_rotations(&path), Err(CliError::Core(nrsfm_uq::Error::Spec(_)))));
    fs::write(&path, "[[1,0,0,\n0,1]]").unwrap();
    assert!(matches!(load_rotations(&path), Err(CliError::Parse { line: 2, .. })));
}
