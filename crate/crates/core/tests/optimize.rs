mod common;

use common::{scenario, subset};
use rigcal_core::eval::calib_errors;
use rigcal_core::geometry::RigidTransform;
use rigcal_core::loss::{Huber, RobotTrajectory};
use rigcal_core::optimize::{initialize, minimize, prepare, solve, Constraints, OptimizerConfig, Termination};
use rigcal_core::synth::{Mode, Scenario};
use rigcal_core::Error;

fn quick() -> OptimizerConfig {
    OptimizerConfig {
        max_iterations: 400,
        ..OptimizerConfig::default()
    }
}

/// Translation error ignoring the component along `axis`.
fn planar_error(est: &RigidTransform, truth: &RigidTransform, axis: &nalgebra::Vector3<f64>) -> f64 {
    let d = est.translation - truth.translation;
    (d - axis * d.dot(axis)).norm()
}

#[test]
fn noiseless_initialization_is_close() {
    for (cams, seed) in [(1, 1), (2, 2)] {
        let s = scenario(Mode::Arm, cams, 8, seed);
        let cfg = OptimizerConfig::default();
        let prep = prepare(&s.inputs, &s.trajectory, &cfg).unwrap();
        let init = initialize(&prep, &cfg).unwrap();
        let (et, er) = calib_errors(&init.params.extrinsics, &s.truth.extrinsics).unwrap();
        assert!(et <= 0.05 && er <= 0.1, "arm M={cams}: {et} {er}");
        assert!(init.frozen_axes.iter().all(Option::is_none));
    }
    let s = scenario(Mode::Mobile, 3, 8, 3);
    let cfg = OptimizerConfig::default();
    let prep = prepare(&s.inputs, &s.trajectory, &cfg).unwrap();
    let init = initialize(&prep, &cfg).unwrap();
    for j in 0..3 {
        let axis = init.frozen_axes[j].expect("planar motion");
        assert!(init.flags[j].z_unobservable);
        assert!(planar_error(&init.params.extrinsics[j], &s.truth.extrinsics[j], &axis) <= 0.05);
    }
}

#[test]
fn starting_at_the_minimum_keeps_the_loss() {
    let s = scenario(Mode::Arm, 1, 6, 4);
    let cfg = quick();
    let prep = prepare(&s.inputs, &s.trajectory, &cfg).unwrap();
    let init = initialize(&prep, &cfg).unwrap();
    let truth = s.true_parameters();
    let (out, log) = minimize(&truth, &prep.problem, &Constraints::from_init(&init, &cfg), &cfg).unwrap();
    assert!(log.initial_loss <= 1e-9);
    assert!((log.final_loss - log.initial_loss).abs() <= 1e-12, "{} -> {} {:?}", log.initial_loss, log.final_loss, log.termination);
    assert_eq!(log.termination, Termination::Stationary);
    assert_eq!(out, truth);
}

#[test]
fn log_is_bounded_and_best_is_monotone() {
    let mut s = scenario(Mode::Arm, 1, 6, 5);
    perturb_depths(&mut s);
    let cfg = OptimizerConfig {
        max_iterations: 60,
        huber: Some(Huber::default()),
        ..OptimizerConfig::default()
    };
    let prep = prepare(&s.inputs, &s.trajectory, &cfg).unwrap();
    let init = initialize(&prep, &cfg).unwrap();
    let (_, log) = minimize(&init.params, &prep.problem, &Constraints::from_init(&init, &cfg), &cfg).unwrap();
    assert!(!log.records.is_empty() && log.records.len() <= 60);
    assert!(log.final_loss <= log.initial_loss);
    for w in log.records.windows(2) {
        assert!(w[1].best_loss <= w[0].best_loss);
    }
}

/// Re-generates the scenario with depth noise.
fn perturb_depths(s: &mut Scenario) {
    let mut cfg = rigcal_core::synth::preset("franka-like").unwrap();
    cfg.cameras = 1;
    cfg.poses = 6;
    cfg.seed = 5;
    cfg.matches_per_edge = 12;
    cfg.noise.depth_rel = 0.01;
    *s = rigcal_core::synth::generate(&cfg).unwrap();
}

#[test]
fn noiseless_solve_recovers_truth() {
    let mut cfg = rigcal_core::synth::preset("franka-like").unwrap();
    cfg.poses = 8;
    cfg.lambda = vec![2.5];
    cfg.matches_per_edge = 24;
    let s = rigcal_core::synth::generate(&cfg).unwrap();
    let r = solve(&s.inputs, &s.trajectory, &OptimizerConfig::default()).unwrap();
    let (et, er) = calib_errors(&r.extrinsics(), &s.truth.extrinsics).unwrap();
    assert!(et <= 1e-4 && er <= 1e-5, "{et} {er}");
    assert!((r.cameras[0].lambda / 2.5 - 1.0).abs() <= 1e-4);
    assert!(r.log.final_loss <= 1e-8);
    assert!(r.cloud.len() > 1000);
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
}

#[test]
fn planar_motion_flags_every_camera() {
    let s = scenario(Mode::Mobile, 3, 6, 6);
    let r = solve(&s.inputs, &s.trajectory, &quick()).unwrap();
    for c in &r.cameras {
        assert!(c.flags.z_unobservable);
        let (h, _) = c.flags.z_recovered.expect("masks present");
        assert!(h > 0.3 && h < 0.7);
    }
    assert!(r.ground_plane.is_some());
}

#[test]
fn single_pose_is_rejected() {
    let s = scenario(Mode::Arm, 2, 4, 7);
    let inputs = subset(&s.inputs, |v| v.camera == 0 || v.pose_index == 0);
    let cfg = quick();
    let prep = prepare(&inputs, &s.trajectory, &cfg).unwrap();
    assert!(matches!(initialize(&prep, &cfg), Err(Error::InsufficientPoses { camera: 1, found: 1 })));
    assert!(matches!(solve(&inputs, &s.trajectory, &cfg), Err(Error::InsufficientPoses { .. })));
}

#[test]
fn pure_rotation_trajectory_falls_back_to_unit_scale() {
    let s = scenario(Mode::Arm, 1, 5, 8);
    let rotations: Vec<RigidTransform> = s
        .trajectory
        .poses()
        .iter()
        .map(|p| RigidTransform::from_rotation(p.rotation))
        .collect();
    let traj = RobotTrajectory::from_absolute(&rotations).unwrap();
    let cfg = quick();
    let prep = prepare(&s.inputs, &traj, &cfg).unwrap();
    let init = initialize(&prep, &cfg).unwrap();
    assert!(init.flags[0].lambda_fallback);
    assert_eq!(init.params.log_lambda[0], 0.0);
}

#[test]
fn single_camera_result_ignores_cross_switch() {
    let s = scenario(Mode::Arm, 1, 5, 9);
    let on = quick();
    let off = OptimizerConfig { cross_loss: false, ..quick() };
    assert_eq!(solve(&s.inputs, &s.trajectory, &on).unwrap(), solve(&s.inputs, &s.trajectory, &off).unwrap());
}

#[test]
fn solve_is_deterministic_across_thread_counts() {
    let mut cfg = rigcal_core::synth::preset("memroc-like").unwrap();
    cfg.poses = 5;
    cfg.matches_per_edge = 16;
    cfg.noise.depth_rel = 0.01;
    cfg.noise.outlier_fraction = 0.05;
    let s = rigcal_core::synth::generate(&cfg).unwrap();
    let opt = OptimizerConfig {
        huber: Some(Huber::default()),
        ..quick()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| solve(&s.inputs, &s.trajectory, &opt).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));
}

#[test]
fn invalid_configs_are_rejected() {
    let s = scenario(Mode::Arm, 1, 3, 10);
    for cfg in [
        OptimizerConfig { max_iterations: 0, ..quick() },
        OptimizerConfig { tolerance: 0.0, ..quick() },
        OptimizerConfig { warmup: 1.5, ..quick() },
        OptimizerConfig { outlier_gate: Some(-1.0), ..quick() },
    ] {
        assert!(matches!(solve(&s.inputs, &s.trajectory, &cfg), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn trajectory_must_cover_every_pose_index() {
    let s = scenario(Mode::Arm, 1, 4, 11);
    let short = RobotTrajectory::from_absolute(&s.trajectory.poses()[..2]).unwrap();
    assert!(matches!(solve(&s.inputs, &short, &quick()), Err(Error::PoseIndexMismatch(_))));
}
