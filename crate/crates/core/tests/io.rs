mod common;

use std::fs;
use std::path::Path;

use common::{random_transform, scenario};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigcal_core::geometry::{Rotation, RigidTransform};
use rigcal_core::io::{
    export_cloud, format_result, format_rows, format_trajectory, parse_result, parse_trajectory, quantize_inputs, read_archive,
    read_cloud, write_archive, write_cloud, Cloud, FrameKind, ResultFile,
};
use rigcal_core::loss::RobotTrajectory;
use rigcal_core::optimize::{closed_form, OptimizerConfig};
use rigcal_core::scene::SceneInputs;
use rigcal_core::synth::{generate, preset, Mode};
use rigcal_core::Error;

fn rich_inputs() -> SceneInputs {
    let mut cfg = preset("memroc-like").unwrap();
    cfg.cameras = 2;
    cfg.poses = 4;
    cfg.estimates_per_view = 2;
    cfg.intrinsics_prior = true;
    cfg.noise.depth_rel = 0.01;
    cfg.seed = 5;
    generate(&cfg).unwrap().inputs
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn written(inputs: &SceneInputs) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path(), inputs).unwrap();
    dir
}

#[test]
fn archive_round_trip_is_identity_on_stored_precision() {
    let inputs = rich_inputs();
    assert!(inputs.views.iter().all(|v| v.ground_mask.is_some() && v.intrinsics_prior.is_some()));
    assert!(inputs.views.iter().any(|v| v.corners.is_some()));
    let dir = written(&inputs);
    let back = read_archive(dir.path()).unwrap();
    assert_eq!(back, quantize_inputs(&inputs));

    let again = written(&back);
    assert_eq!(files(dir.path()), files(again.path()));
    assert_eq!(read_archive(again.path()).unwrap(), back);
}

#[test]
fn archive_file_sizes_follow_the_layout() {
    let inputs = rich_inputs();
    let dir = written(&inputs);
    let v = &inputs.views[0];
    let n = (v.width * v.height) as u64;
    let size = |name: &str| fs::metadata(dir.path().join(name)).unwrap().len();
    assert_eq!(size("view_0_est0_points.bin"), 12 * n);
    assert_eq!(size("view_0_est1_conf.bin"), 4 * n);
    assert_eq!(size("view_0_mask.bin"), n);
    let nv = inputs.views.len() as u64;
    assert_eq!(size("scores.bin"), 4 * nv * nv);
    let m = &inputs.matches[0];
    assert_eq!(
        size(&format!("matches_{}_{}.bin", m.view_a, m.view_b)),
        20 * m.pairs.len() as u64
    );
    let raw = fs::read(dir.path().join("view_0_est0_points.bin")).unwrap();
    let p = v.estimates[0]
        .points
        .iter()
        .zip(&v.estimates[0].confidence)
        .find(|(_, c)| **c > 0.0)
        .unwrap()
        .0;
    let idx = v.estimates[0].points.iter().position(|q| q == p).unwrap();
    let x = f32::from_le_bytes(raw[idx * 12..idx * 12 + 4].try_into().unwrap());
    assert_eq!(x, p.x as f32);
}

#[test]
fn truncated_points_file_is_corrupt() {
    let dir = written(&rich_inputs());
    let path = dir.path().join("view_1_est0_points.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&path, bytes).unwrap();
    match read_archive(dir.path()) {
        Err(Error::CorruptBinary { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected CorruptBinary, got {other:?}"),
    }
}

#[test]
fn matches_naming_an_absent_view_are_a_missing_channel() {
    let dir = written(&rich_inputs());
    let manifest = dir.path().join("manifest.txt");
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("matches a=0 b=99 count=1\n");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::MissingChannel(_))));
}

#[test]
fn deleted_channel_is_missing() {
    let dir = written(&rich_inputs());
    fs::remove_file(dir.path().join("view_2_mask.bin")).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::MissingChannel(_))));
    fs::remove_file(dir.path().join("manifest.txt")).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::MissingChannel(_))));
}

#[test]
fn invalid_channel_values_are_corrupt() {
    let dir = written(&rich_inputs());
    let mask = dir.path().join("view_0_mask.bin");
    let mut bytes = fs::read(&mask).unwrap();
    bytes[3] = 2;
    fs::write(&mask, bytes).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::CorruptBinary { .. })));

    let dir = written(&rich_inputs());
    let conf = dir.path().join("view_0_est0_conf.bin");
    let mut bytes = fs::read(&conf).unwrap();
    bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&conf, bytes).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::CorruptBinary { .. })));

    let dir = written(&rich_inputs());
    let scores = dir.path().join("scores.bin");
    let mut bytes = fs::read(&scores).unwrap();
    bytes[4..8].copy_from_slice(&7.0f32.to_le_bytes());
    fs::write(&scores, bytes).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::CorruptBinary { .. })));
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = written(&rich_inputs());
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("width=", "widht=", 1)).unwrap();
    assert!(matches!(read_archive(dir.path()), Err(Error::MalformedLine { line: 3, .. })));
}

fn trajectory_text(n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut poses = vec![RigidTransform::identity()];
    poses.extend((1..n).map(|_| random_transform(&mut rng)));
    format_trajectory(&RobotTrajectory::new(poses).unwrap())
}

fn replace_line(text: &str, index: usize, line: &str) -> String {
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let pos = lines.iter().position(|l| l.starts_with(&format!("{index} "))).unwrap();
    lines[pos] = line.to_string();
    lines.join("\n")
}

fn row(index: usize, r: &Matrix3<f64>, t: &Vector3<f64>) -> String {
    let v = [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ];
    let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{index} {}", nums.join(" "))
}

#[test]
fn identity_first_file_gives_every_pose() {
    let parsed = parse_trajectory(&trajectory_text(25)).unwrap();
    assert_eq!(parsed.trajectory.len(), 25);
    assert!(parsed.warnings.is_empty());
}

#[test]
fn trajectory_write_read_reproduces_poses() {
    let text = trajectory_text(10);
    let parsed = parse_trajectory(&text).unwrap().trajectory;
    let again = parse_trajectory(&format_trajectory(&parsed)).unwrap().trajectory;
    for (a, b) in parsed.poses().iter().zip(again.poses()) {
        assert!((a.to_matrix() - b.to_matrix()).norm() < 1e-14);
    }
}

#[test]
fn eleven_numbers_are_a_malformed_line() {
    let text = trajectory_text(4);
    let short: Vec<&str> = text.lines().nth(3).unwrap().split_whitespace().collect();
    let bad = replace_line(&text, 2, &short[..12].join(" "));
    assert!(matches!(parse_trajectory(&bad), Err(Error::MalformedLine { line: 4, .. })));
    let bad = replace_line(&text, 2, &format!("{} x", short[..12].join(" ")));
    assert!(matches!(parse_trajectory(&bad), Err(Error::MalformedLine { .. })));
    let bad = replace_line(&text, 2, &format!("7 {}", short[1..].join(" ")));
    assert!(matches!(parse_trajectory(&bad), Err(Error::MalformedLine { .. })));
}

#[test]
fn reflection_is_not_a_rotation() {
    let text = trajectory_text(4);
    let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    let bad = replace_line(&text, 1, &row(1, &r, &Vector3::new(0.1, 0.2, 0.3)));
    assert!(matches!(parse_trajectory(&bad), Err(Error::NonRigidRotation { line: 3, .. })));
}

#[test]
fn small_drift_is_repaired_and_large_drift_rejected() {
    let text = trajectory_text(4);
    let r = Rotation::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8).normalize(), 0.7).matrix();
    let t = Vector3::new(0.1, 0.2, 0.3);
    let mut nudged = r;
    nudged[(0, 1)] += 1e-4;
    let parsed = parse_trajectory(&replace_line(&text, 2, &row(2, &nudged, &t))).unwrap();
    assert_eq!(parsed.warnings.len(), 1);
    let fixed = parsed.trajectory.pose(2).rotation.matrix();
    assert!((fixed.transpose() * fixed - Matrix3::identity()).norm() < 1e-12);
    assert!((fixed - r).norm() < 2e-4);
    let stored = parse_trajectory(&format_rows(&parsed.rows)).unwrap();
    assert!(stored.warnings.is_empty());
    assert_eq!(stored.rows, parsed.rows);

    let mut bent = r;
    bent[(0, 1)] += 1e-2;
    let bad = replace_line(&text, 2, &row(2, &bent, &t));
    assert!(matches!(parse_trajectory(&bad), Err(Error::NonRigidRotation { .. })));
}

#[test]
fn first_pose_near_identity_is_forced() {
    let text = trajectory_text(3);
    let near = replace_line(&text, 0, &row(0, &Matrix3::identity(), &Vector3::new(5e-7, 0.0, 0.0)));
    let parsed = parse_trajectory(&near).unwrap();
    assert_eq!(parsed.warnings.len(), 1);
    assert_eq!(*parsed.trajectory.pose(0), RigidTransform::identity());
    assert_eq!(parsed.rows[0], RigidTransform::identity().to_row_major_3x4());

    let far = replace_line(&text, 0, &row(0, &Matrix3::identity(), &Vector3::new(1e-3, 0.0, 0.0)));
    match parse_trajectory(&far) {
        Err(Error::FirstPoseNotIdentity(d)) => assert!((d - 1e-3).abs() < 1e-12),
        other => panic!("expected FirstPoseNotIdentity, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn trajectory_text_round_trips(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut poses = vec![RigidTransform::identity()];
        poses.extend((1..n).map(|_| random_transform(&mut rng)));
        let traj = RobotTrajectory::new(poses).unwrap();
        let text = format_trajectory(&traj);
        let back = parse_trajectory(&text).unwrap();
        prop_assert!(back.warnings.is_empty());
        prop_assert_eq!(format_rows(&back.rows), text);
        prop_assert_eq!(parse_trajectory(&format_rows(&back.rows)).unwrap(), back.clone());
        for (a, b) in traj.poses().iter().zip(back.trajectory.poses()) {
            prop_assert!((a.to_matrix() - b.to_matrix()).norm() < 1e-14);
        }
    }
}

fn small_result() -> (rigcal_core::synth::Scenario, rigcal_core::optimize::CalibrationResult) {
    let s = scenario(Mode::Arm, 1, 6, 2);
    let r = closed_form(&s.inputs, &s.trajectory, &OptimizerConfig::default()).unwrap();
    (s, r)
}

fn assert_same_result(a: &ResultFile, b: &ResultFile) {
    let close = |x: &RigidTransform, y: &RigidTransform| (x.to_matrix() - y.to_matrix()).norm() < 1e-14;
    assert_eq!(a.cameras.len(), b.cameras.len());
    for (x, y) in a.cameras.iter().zip(&b.cameras) {
        assert!(close(&x.extrinsics, &y.extrinsics));
        assert_eq!((x.lambda, x.motion_scale, x.cal_residual), (y.lambda, y.motion_scale, y.cal_residual));
        assert_eq!((x.intrinsics, x.flags), (y.intrinsics, y.flags));
    }
    assert_eq!(a.views.len(), b.views.len());
    for (x, y) in a.views.iter().zip(&b.views) {
        assert!(close(&x.pose, &y.pose));
        assert_eq!(
            (x.camera, x.pose_index, x.sigma, x.depth_scale, x.anchor),
            (y.camera, y.pose_index, y.sigma, y.depth_scale, y.anchor)
        );
    }
    assert_eq!(a.robot_poses.len(), b.robot_poses.len());
    for (x, y) in a.robot_poses.iter().zip(&b.robot_poses) {
        assert!(close(x, y));
    }
    assert_eq!((&a.ground_plane, &a.loss, &a.warnings), (&b.ground_plane, &b.loss, &b.warnings));
}

#[test]
fn result_text_round_trips() {
    let (_, r) = small_result();
    let file = ResultFile::from(&r);
    let text = format_result(&file);
    assert!(text.contains("\ncamera 0\nextrinsics "));
    assert_same_result(&parse_result(&text).unwrap(), &file);

    let mut flagged = file.clone();
    flagged.cameras[0].flags.z_unobservable = true;
    flagged.cameras[0].flags.z_recovered = Some((0.5, 0.01));
    flagged.ground_plane = Some(rigcal_core::ground::PlaneModel {
        normal: Vector3::z(),
        offset: -0.25,
    });
    flagged.warnings.push("two words".into());
    flagged.loss = None;
    assert_same_result(&parse_result(&format_result(&flagged)).unwrap(), &flagged);
}

#[test]
fn result_missing_a_field_is_rejected() {
    let (_, r) = small_result();
    let text = format_result(&ResultFile::from(&r));
    let cut: String = text.lines().filter(|l| !l.starts_with("lambda")).map(|l| format!("{l}\n")).collect();
    assert!(matches!(parse_result(&cut), Err(Error::Parse(_))));
    let typo = text.replacen("motion_scale", "motion_scal", 1);
    assert!(matches!(parse_result(&typo), Err(Error::MalformedLine { .. })));
}

#[test]
fn exported_cloud_round_trips_with_frames() {
    let (s, r) = small_result();
    let valid: usize = s
        .inputs
        .view_records()
        .unwrap()
        .iter()
        .map(|v| v.canonical.valid_count())
        .sum();
    assert_eq!(r.cloud.len(), valid);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    export_cloud(&r, &path).unwrap();
    let back = read_cloud(&path).unwrap();
    assert_eq!(back.points.len(), valid);
    for (a, b) in r.cloud.iter().zip(&back.points) {
        assert_eq!(b.map(|x| x as f32), a.map(|x| x as f32));
    }
    let robots = back.frames.iter().filter(|f| f.kind == FrameKind::Robot).count();
    let cams = back.frames.iter().filter(|f| f.kind == FrameKind::Camera).count();
    assert_eq!((robots, cams), (r.robot_poses.len(), r.views.len()));
    for f in back.frames.iter().filter(|f| f.kind == FrameKind::Camera) {
        let want = r.views[f.index].pose.to_matrix();
        assert!((f.pose.to_matrix() - want).norm() < 1e-14);
    }
}

#[test]
fn empty_cloud_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Cloud {
        points: Vec::new(),
        frames: Vec::new(),
    };
    assert!(matches!(write_cloud(&dir.path().join("c.ply"), &empty), Err(Error::EmptyCloud)));
}
