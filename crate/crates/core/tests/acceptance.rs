//! Acceptance criteria A1-A10 on synthetic scenes. Prints one line per
//! criterion and exits non-zero when a criterion fails unexpectedly.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use common::{numeric_gradient, perturb, problem, random_transform, worst_mismatch};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigcal_core::eval::{calib_errors, scale_accuracy};
use rigcal_core::geometry::{Rotation, RigidTransform};
use rigcal_core::handeye::{analyze_observability, solve_rotation_translation, solve_with_scale, MotionPair};
use rigcal_core::io::{
    format_rows, format_trajectory, parse_trajectory, quantize_inputs, read_archive, write_archive,
};
use rigcal_core::loss::{Huber, LossOptions, LossWeights};
use rigcal_core::optimize::{solve, CalibrationResult, OptimizerConfig};
use rigcal_core::synth::{generate, preset, Mode, Scenario, ScenarioConfig};
use rigcal_core::Error;

/// Criteria known not to hold; see the project notes for the measurements.
const KNOWN_UNATTAINED: &[&str] = &["A3", "A6"];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn noisy(mut cfg: ScenarioConfig, seed: u64) -> ScenarioConfig {
    cfg.noise.depth_rel = 0.01;
    cfg.noise.outlier_fraction = 0.05;
    cfg.seed = seed;
    cfg
}

fn robust() -> OptimizerConfig {
    OptimizerConfig {
        huber: Some(Huber::default()),
        ..OptimizerConfig::default()
    }
}

struct Run {
    scenario: Scenario,
    result: CalibrationResult,
    e_t: f64,
    e_theta: f64,
}

fn run(cfg: &ScenarioConfig, opt: &OptimizerConfig) -> Run {
    let scenario = generate(cfg).expect("scenario");
    let result = solve(&scenario.inputs, &scenario.trajectory, opt).expect("solve");
    let (e_t, e_theta) = calib_errors(&result.extrinsics(), &scenario.truth.extrinsics).unwrap();
    Run {
        scenario,
        result,
        e_t,
        e_theta,
    }
}

/// Scale accuracy of the checkerboard lifted with the calibrated views.
fn board_error(r: &Run) -> Option<f64> {
    let board = r.scenario.inputs.board.as_ref()?;
    let records = r.scenario.inputs.view_records().unwrap();
    let detections: Vec<_> = records
        .iter()
        .zip(&r.scenario.inputs.views)
        .filter_map(|(rec, v)| r.result.lift(rec, v.corners.as_ref()?).unwrap())
        .collect();
    scale_accuracy(&detections, board).ok().map(|s| s.error_percent)
}

fn arm_noiseless() -> &'static (Run, f64) {
    static CELL: OnceLock<(Run, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = preset("franka-like").unwrap();
        cfg.lambda = vec![2.5];
        let start = Instant::now();
        let r = run(&cfg, &OptimizerConfig::default());
        (r, start.elapsed().as_secs_f64())
    })
}

fn arm_noisy(poses: usize, opt: &OptimizerConfig) -> Vec<Run> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = noisy(preset("franka-like").unwrap(), seed);
            cfg.poses = poses;
            run(&cfg, opt)
        })
        .collect()
}

fn arm_noisy_full() -> &'static Vec<Run> {
    static CELL: OnceLock<Vec<Run>> = OnceLock::new();
    CELL.get_or_init(|| arm_noisy(25, &robust()))
}

fn mobile_noisy(cross: bool) -> Vec<Run> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = noisy(preset("memroc-like").unwrap(), seed);
            let opt = OptimizerConfig {
                cross_loss: cross,
                ..robust()
            };
            run(&cfg, &opt)
        })
        .collect()
}

fn mobile_noisy_cross() -> &'static Vec<Run> {
    static CELL: OnceLock<Vec<Run>> = OnceLock::new();
    CELL.get_or_init(|| mobile_noisy(true))
}

fn a1() -> Outcome {
    let (r, secs) = arm_noiseless();
    let lambda_err = (r.result.cameras[0].lambda / 2.5 - 1.0).abs();
    outcome(
        r.e_t <= 1e-4 && r.e_theta <= 1e-5 && lambda_err <= 1e-4 && *secs <= 60.0,
        format!(
            "noiseless arm: e_t {:.2e} m (<= 1e-4), e_theta {:.2e} rad (<= 1e-5), |lambda/2.5 - 1| {:.2e} (<= 1e-4), {:.1} s (<= 60)",
            r.e_t, r.e_theta, lambda_err, secs
        ),
    )
}

fn a2() -> Outcome {
    let runs = arm_noisy_full();
    let et = median(runs.iter().map(|r| r.e_t).collect());
    let er = median(runs.iter().map(|r| r.e_theta).collect());
    outcome(
        et <= 0.01 && er <= 0.02,
        format!("noisy arm, 5 seeds: median e_t {et:.4} m (<= 0.01), median e_theta {er:.4} rad (<= 0.02)"),
    )
}

/// Median e_t per pose count and median e_theta at the smallest count.
fn sweep(sizes: &[usize], opt: &OptimizerConfig) -> (Vec<f64>, f64) {
    let mut et = Vec::new();
    let mut er_first = 0.0;
    for &n in sizes {
        let fresh;
        let runs: &[Run] = if n == 25 && opt.refine_intrinsics {
            arm_noisy_full()
        } else {
            fresh = arm_noisy(n, opt);
            &fresh
        };
        et.push(median(runs.iter().map(|r| r.e_t).collect()));
        if n == sizes[0] {
            er_first = median(runs.iter().map(|r| r.e_theta).collect());
        }
    }
    (et, er_first)
}

fn inversions(et: &[f64]) -> usize {
    et.windows(2).filter(|w| w[1] > w[0]).count()
}

fn a3() -> Outcome {
    let sizes = [5usize, 9, 13, 17, 21, 25];
    let (et, er_first) = sweep(&sizes, &robust());
    let frozen = OptimizerConfig {
        refine_intrinsics: false,
        ..robust()
    };
    let (et_frozen, _) = sweep(&sizes, &frozen);
    let list = |v: &[f64]| v.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" ");
    let inv = inversions(&et);
    outcome(
        inv <= 1 && et[0] <= 0.05 && er_first <= 0.04,
        format!(
            "median e_t for N=5..25 [{}] m, {inv} inversion(s) (<= 1); N=5 e_t {:.4} m (<= 0.05), e_theta {er_first:.4} rad (<= 0.04); with intrinsics frozen [{}] m, {} inversion(s)",
            list(&et),
            et[0],
            list(&et_frozen),
            inversions(&et_frozen)
        ),
    )
}

fn a4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut coords = 0;
    for k in 0..100u64 {
        let mode = if rng.random_bool(0.5) { Mode::Arm } else { Mode::Mobile };
        let cameras = if rng.random_bool(0.5) { 1 } else { 3 };
        let mut cfg = preset(if mode == Mode::Arm { "franka-like" } else { "memroc-like" }).unwrap();
        cfg.cameras = cameras;
        cfg.poses = rng.random_range(3..=5);
        cfg.matches_per_edge = 12;
        cfg.seed = 1000 + k;
        if rng.random_bool(0.5) {
            cfg.noise.depth_rel = 0.01;
        }
        let s = generate(&cfg).unwrap();
        let prob = problem(&s);
        let p = perturb(&s.true_parameters(), 5000 + k);
        let opts = LossOptions {
            weights: LossWeights {
                w3d: rng.random_range(0.1..2.0),
                w2d: rng.random_range(0.001..0.1),
                wcal: rng.random_range(0.1..2.0),
                wcross: rng.random_range(0.1..2.0),
            },
            w_rot: rng.random_range(0.5..2.0),
            w_trans: rng.random_range(0.5..2.0),
            robust: rng.random_bool(0.5).then(Huber::default),
            cross_enabled: true,
        };
        let analytic = prob.gradient(&p, &opts).unwrap().to_flat();
        let numeric = numeric_gradient(&p, 1e-6, |q| prob.total_loss(q, &opts).unwrap().total);
        coords += analytic.len();
        if let Some((i, a, n)) = worst_mismatch(&analytic, &numeric, 1e-4, 1e-8) {
            failures.push(format!("config {k} coordinate {i}: {a:e} vs {n:e}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "100 configurations, {coords} coordinates vs central differences (h 1e-6, rel 1e-4, abs 1e-8): {} mismatching{}",
            failures.len(),
            failures.first().map(|f| format!(", first {f}")).unwrap_or_default()
        ),
    )
}

fn a5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_x: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for _ in 0..50 {
        let x = random_transform(&mut rng);
        let robot: Vec<RigidTransform> = (0..8).map(|_| random_transform(&mut rng)).collect();
        let exact: Vec<MotionPair> = robot
            .iter()
            .map(|a| MotionPair {
                robot: *a,
                camera: x.inverse() * *a * x,
            })
            .collect();
        let est = solve_rotation_translation(&exact).unwrap();
        worst_x = worst_x.max((est.to_matrix() - x.to_matrix()).norm());
        let lambda = rng.random_range(0.2..5.0);
        let scaled: Vec<MotionPair> = exact
            .iter()
            .map(|p| MotionPair {
                robot: p.robot,
                camera: RigidTransform::new(p.camera.rotation, p.camera.translation / lambda),
            })
            .collect();
        let (est, l) = solve_with_scale(&scaled).unwrap();
        worst_x = worst_x.max((est.to_matrix() - x.to_matrix()).norm());
        worst_l = worst_l.max((l - lambda).abs());
    }
    let planar: Vec<MotionPair> = (1..6)
        .map(|i| {
            let a = RigidTransform::new(Rotation::rz(0.3 * i as f64), Vector3::new(0.2 * i as f64, 0.1, 0.0));
            MotionPair { robot: a, camera: a }
        })
        .collect();
    let degenerate = matches!(solve_rotation_translation(&planar), Err(Error::DegenerateMotion(_)))
        && matches!(solve_with_scale(&planar), Err(Error::DegenerateMotion(_)));
    outcome(
        worst_x <= 1e-9 && worst_l <= 1e-9 && degenerate,
        format!(
            "50 exact motion sets: max |X - X*| {worst_x:.1e}, max |lambda - lambda*| {worst_l:.1e} (<= 1e-9); single-axis set raises DegenerateMotion: {degenerate}"
        ),
    )
}

fn a6() -> Outcome {
    let mut cfg = preset("memroc-like").unwrap();
    cfg.seed = 6;
    let s = generate(&cfg).unwrap();
    let prob = problem(&s);
    let report = prob.total_loss(&s.true_parameters(), &LossOptions::default()).unwrap();
    let cross_max = report.lcross.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let with = median(mobile_noisy_cross().iter().map(|r| r.e_t).collect());
    let without = median(mobile_noisy(false).iter().map(|r| r.e_t).collect());
    let ratio = with / without;
    outcome(
        cross_max <= 1e-9 && ratio <= 1.0,
        format!(
            "L_cross at truth {cross_max:.1e} (<= 1e-9); noisy median e_t with cross {with:.4} m, without {without:.4} m, ratio {ratio:.3} (<= 1.0)"
        ),
    )
}

fn a7() -> Outcome {
    let cfg = preset("memroc-like").unwrap();
    let s = generate(&cfg).unwrap();
    let poses = s.trajectory.poses();
    let motions: Vec<RigidTransform> = poses.windows(2).map(|w| w[0].inverse() * w[1]).collect();
    let obs = analyze_observability(&motions);
    let axis_ok = obs.unobservable_axis.is_some_and(|a| a.dot(&Vector3::z()).abs() >= 1.0 - 1e-9);
    let z_error = |r: &Run| {
        r.result
            .extrinsics()
            .iter()
            .zip(&r.scenario.truth.extrinsics)
            .map(|(e, t)| (e.translation.z - t.translation.z).abs())
            .fold(0.0, f64::max)
    };
    let exact = run(&cfg, &OptimizerConfig::default());
    let recovered = exact.result.cameras.iter().all(|c| c.flags.z_recovered.is_some());
    let z_exact = z_error(&exact);
    let z_noisy = mobile_noisy_cross().iter().map(z_error).fold(0.0, f64::max);
    outcome(
        obs.singular_values[0] <= 1e-6 && axis_ok && recovered && z_exact <= 1e-3 && z_noisy <= 0.01,
        format!(
            "planar motion: smallest singular value {:.1e} (<= 1e-6), axis is z: {axis_ok}; height error noiseless {z_exact:.2e} m (<= 1e-3), noisy worst of 5 seeds {z_noisy:.4} m (<= 0.01)",
            obs.singular_values[0]
        ),
    )
}

fn a8() -> Outcome {
    let (exact, _) = arm_noiseless();
    let clean = board_error(exact).unwrap_or(f64::INFINITY);
    let noisy: Vec<f64> = arm_noisy_full()
        .iter()
        .map(|r| board_error(r).unwrap_or(f64::INFINITY))
        .collect();
    let worst = noisy.iter().copied().fold(0.0, f64::max);
    outcome(
        clean <= 0.1 && worst <= 5.0,
        format!("3 cm board: noiseless scale error {clean:.2e}% (<= 0.1%), 1% depth noise worst of 5 seeds {worst:.3}% (<= 5%)"),
    )
}

fn a9() -> Outcome {
    let mut cfg = preset("memroc-like").unwrap();
    cfg.poses = 5;
    cfg.matches_per_edge = 12;
    cfg.seed = 9;
    let s = generate(&cfg).unwrap();
    let prob = problem(&s);
    let p = perturb(&s.true_parameters(), 9);
    let w = LossWeights {
        w3d: 0.7,
        w2d: 0.01,
        wcal: 3.0,
        wcross: 2.0,
    };
    let opts = LossOptions {
        weights: w,
        ..LossOptions::default()
    };
    let r = prob.total_loss(&p, &opts).unwrap();
    let sum: f64 = (0..3)
        .map(|j| w.w3d * r.l3d[j] + w.w2d * r.l2d[j] + w.wcal * r.lcal[j])
        .sum::<f64>()
        + r.lcross.iter().map(|(_, v)| w.wcross * v).sum::<f64>();
    let sum_err = (r.total - sum).abs() / r.total.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut gauge_err: f64 = 0.0;
    for j in 0..3 {
        let g = random_transform(&mut rng);
        let mut q = p.clone();
        for (v, info) in prob.views.iter().enumerate() {
            if info.camera == j {
                q.poses[v] = g * q.poses[v];
            }
        }
        let moved = prob.total_loss(&q, &opts).unwrap();
        for c in 0..3 {
            gauge_err = gauge_err.max((moved.lcal[c] - r.lcal[c]).abs() / r.lcal[c].max(1.0));
        }
        for ((_, a), (_, b)) in moved.lcross.iter().zip(&r.lcross) {
            gauge_err = gauge_err.max((a - b).abs() / b.max(1.0));
        }
    }

    let mut single = preset("franka-like").unwrap();
    single.poses = 6;
    single.seed = 9;
    let s1 = generate(&single).unwrap();
    let quick = OptimizerConfig {
        max_iterations: 300,
        ..OptimizerConfig::default()
    };
    let on = solve(&s1.inputs, &s1.trajectory, &quick).unwrap();
    let off = solve(
        &s1.inputs,
        &s1.trajectory,
        &OptimizerConfig {
            cross_loss: false,
            ..quick
        },
    )
    .unwrap();
    let identical = on == off;
    outcome(
        sum_err <= 1e-9 && gauge_err <= 1e-9 && identical,
        format!(
            "total vs sum of terms {sum_err:.1e} (<= 1e-9); motion terms under left-multiplication {gauge_err:.1e} (<= 1e-9); M=1 result identical without cross: {identical}"
        ),
    )
}

fn a10() -> Outcome {
    let mut cfg = noisy(preset("memroc-like").unwrap(), 10);
    cfg.poses = 6;
    cfg.estimates_per_view = 2;
    cfg.intrinsics_prior = true;
    let s = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path(), &s.inputs).unwrap();
    let back = read_archive(dir.path()).unwrap();
    let archive_exact = back == quantize_inputs(&s.inputs);
    let again = tempfile::tempdir().unwrap();
    write_archive(again.path(), &back).unwrap();
    let bytes_exact = std::fs::read_dir(dir.path()).unwrap().all(|e| {
        let e = e.unwrap();
        std::fs::read(e.path()).unwrap() == std::fs::read(again.path().join(e.file_name())).unwrap()
    });

    let text = format_trajectory(&s.trajectory);
    let parsed = parse_trajectory(&text).unwrap();
    let traj_exact = format_rows(&parsed.rows) == text
        && parse_trajectory(&format_rows(&parsed.rows)).unwrap().rows == parsed.rows
        && parsed
            .rows
            .iter()
            .zip(s.trajectory.poses())
            .all(|(r, p)| *r == p.to_row_major_3x4());

    let mut classes = Vec::new();
    let fresh = || {
        let d = tempfile::tempdir().unwrap();
        write_archive(d.path(), &s.inputs).unwrap();
        d
    };
    let d = fresh();
    let f = d.path().join("view_2_est1_points.bin");
    let b = std::fs::read(&f).unwrap();
    std::fs::write(&f, &b[..b.len() - 7]).unwrap();
    classes.push(matches!(read_archive(d.path()), Err(Error::CorruptBinary { .. })));
    let d = fresh();
    let f = d.path().join("view_0_mask.bin");
    let mut b = std::fs::read(&f).unwrap();
    b[0] = 9;
    std::fs::write(&f, b).unwrap();
    classes.push(matches!(read_archive(d.path()), Err(Error::CorruptBinary { .. })));
    let d = fresh();
    let m = d.path().join("manifest.txt");
    let t = std::fs::read_to_string(&m).unwrap() + "matches a=1 b=500 count=3\n";
    std::fs::write(&m, t).unwrap();
    classes.push(matches!(read_archive(d.path()), Err(Error::MissingChannel(_))));
    let d = fresh();
    std::fs::remove_file(d.path().join("scores.bin")).unwrap();
    classes.push(matches!(read_archive(d.path()), Err(Error::MissingChannel(_))));

    let lines: Vec<&str> = text.lines().collect();
    let edit = |k: usize, f: &dyn Fn(&mut Vec<String>)| {
        let mut fields: Vec<String> = lines[k].split_whitespace().map(String::from).collect();
        f(&mut fields);
        let mut out: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        out[k] = fields.join(" ");
        out.join("\n")
    };
    let short = edit(3, &|f| {
        f.pop();
    });
    classes.push(matches!(parse_trajectory(&short), Err(Error::MalformedLine { .. })));
    let reflected = edit(3, &|f| {
        for i in [3, 7, 11] {
            let v: f64 = f[i].parse().unwrap();
            f[i] = (-v).to_string();
        }
    });
    classes.push(matches!(parse_trajectory(&reflected), Err(Error::NonRigidRotation { .. })));
    let shifted = edit(1, &|f| f[4] = "0.01".into());
    classes.push(matches!(parse_trajectory(&shifted), Err(Error::FirstPoseNotIdentity(_))));

    let correct = classes.iter().filter(|c| **c).count();
    outcome(
        archive_exact && bytes_exact && traj_exact && correct == classes.len(),
        format!(
            "archive read == stored values: {archive_exact}, rewrite byte-identical: {bytes_exact}; trajectory rows bit-exact: {traj_exact}; corrupted inputs with the specified error: {correct}/{}",
            classes.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
    ];
    let mut passed = 0;
    let mut unexpected = Vec::new();
    for (name, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        let note = if !result.pass && KNOWN_UNATTAINED.contains(&name) {
            " [known, not attained]"
        } else {
            ""
        };
        println!("{name:<4} {status}{note}  {} ({:.1} s)", result.detail, start.elapsed().as_secs_f64());
        if result.pass {
            passed += 1;
        } else if note.is_empty() {
            unexpected.push(name);
        }
    }
    println!("acceptance: {passed}/10 criteria met");
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", unexpected.join(", "));
        ExitCode::FAILURE
    }
}
