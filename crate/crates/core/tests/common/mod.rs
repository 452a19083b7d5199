#![allow(dead_code)]

use std::path::PathBuf;

use poseloss::data::{format_pose_line_file, parse_matrix_pose_file, parse_pose_line_file};
use poseloss::geom::{Pose, Quaternion, Vec3};
use poseloss::Error;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.position - b.position).norm() <= tol && (a.rotation - b.rotation).norm() <= tol
}

fn expect_pose(file: &str, want: Pose, tol: f64) -> Result<(), String> {
    match parse_matrix_pose_file(&read_fixture(file)) {
        Ok(p) if close(&p, &want, tol) => Ok(()),
        other => Err(format!("{file}: got {other:?}, want {want:?}")),
    }
}

fn expect_matrix_err(file: &str, ok: fn(&Error) -> bool) -> Result<(), String> {
    match parse_matrix_pose_file(&read_fixture(file)) {
        Err(e) if ok(&e) => Ok(()),
        other => Err(format!("{file}: unexpected {other:?}")),
    }
}

fn expect_lines_err(file: &str, ok: fn(&Error) -> bool) -> Result<(), String> {
    match parse_pose_line_file(&read_fixture(file)) {
        Err(e) if ok(&e) => Ok(()),
        other => Err(format!("{file}: unexpected {other:?}")),
    }
}

fn pose_line_ok() -> Result<(), String> {
    let got = parse_pose_line_file(&read_fixture("poses_ok.txt")).map_err(|e| e.to_string())?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let want = [
        (
            "seq1/frame00001.png",
            Pose::new(Vec3::new(1.0, 2.0, 3.0), Quaternion::IDENTITY),
            0.0,
        ),
        (
            "seq1/frame00002.png",
            Pose::new(
                Vec3::new(-0.5, 0.25, 10.0),
                Quaternion::new(0.5, 0.5, 0.5, 0.5),
            ),
            0.0,
        ),
        (
            "seq2/frame00001.png",
            Pose::new(
                Vec3::new(4.0, 5.0, 6.0),
                Quaternion::new(0.0, 0.0, 1.0, 0.0),
            ),
            0.0,
        ),
        (
            "seq2/frame00002.png",
            Pose::new(Vec3::new(7.0, 8.0, 9.0), Quaternion::new(h, 0.0, 0.0, -h)),
            1e-7,
        ),
    ];
    if got.len() != want.len() {
        return Err(format!("poses_ok.txt: {} entries", got.len()));
    }
    for ((id, pose), (wid, wpose, tol)) in got.iter().zip(want) {
        if id != wid || !close(pose, &wpose, tol) {
            return Err(format!(
                "poses_ok.txt: got ({id}, {pose:?}), want ({wid}, {wpose:?})"
            ));
        }
    }
    let again = parse_pose_line_file(&format_pose_line_file(&got)).map_err(|e| e.to_string())?;
    if got
        .iter()
        .zip(&again)
        .any(|(a, b)| a.0 != b.0 || !close(&a.1, &b.1, 1e-9))
    {
        return Err("poses_ok.txt: re-serialized file does not parse back".into());
    }
    Ok(())
}

/// One named outcome per fixture expectation.
pub fn parser_fixture_checks() -> Vec<(&'static str, Result<(), String>)> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        (
            "matrix identity",
            expect_pose(
                "matrix_identity.txt",
                Pose::new(Vec3::ZERO, Quaternion::IDENTITY),
                0.0,
            ),
        ),
        (
            "matrix translation",
            expect_pose(
                "matrix_translation.txt",
                Pose::new(Vec3::new(1.0, 2.0, 3.0), Quaternion::IDENTITY),
                0.0,
            ),
        ),
        (
            "matrix 90 deg about z",
            expect_pose(
                "matrix_rot90_z.txt",
                Pose::new(Vec3::new(0.5, -0.25, 1.5), Quaternion::new(h, 0.0, 0.0, h)),
                1e-12,
            ),
        ),
        (
            "matrix 15 tokens",
            expect_matrix_err("matrix_15_tokens.txt", |e| {
                matches!(e, Error::MalformedFile { .. })
            }),
        ),
        (
            "matrix non-numeric",
            expect_matrix_err("matrix_non_numeric.txt", |e| {
                matches!(e, Error::MalformedFile { .. })
            }),
        ),
        (
            "matrix scaled",
            expect_matrix_err("matrix_scaled.txt", |e| {
                matches!(e, Error::NotARotation { .. })
            }),
        ),
        (
            "matrix reflection",
            expect_matrix_err("matrix_reflection.txt", |e| {
                matches!(e, Error::NotARotation { .. })
            }),
        ),
        (
            "matrix bottom row",
            expect_matrix_err("matrix_bad_bottom_row.txt", |e| {
                matches!(e, Error::MalformedFile { .. })
            }),
        ),
        ("pose lines", pose_line_ok()),
        (
            "pose line 7 fields",
            expect_lines_err("poses_seven_fields.txt", |e| {
                matches!(e, Error::MalformedFile { line: Some(5), .. })
            }),
        ),
        (
            "pose line bad quaternion",
            expect_lines_err(
                "poses_bad_quaternion.txt",
                |e| matches!(e, Error::BadQuaternion { line: 6, norm } if *norm == 1.5),
            ),
        ),
        (
            "pose line non-numeric",
            expect_lines_err("poses_non_numeric.txt", |e| {
                matches!(e, Error::MalformedFile { line: Some(4), .. })
            }),
        ),
        (
            "pose line truncated header",
            expect_lines_err("poses_truncated_header.txt", |e| {
                matches!(e, Error::MalformedFile { .. })
            }),
        ),
    ]
}
