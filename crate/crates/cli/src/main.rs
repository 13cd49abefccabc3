//! Command-line front end: simulate scenes, calibrate, evaluate and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use rigcal_core::eval::{calib_errors, lift_corners, scale_accuracy, ScaleAccuracy};
use rigcal_core::geometry::rotation_angle;
use rigcal_core::io::{
    cloud_path_for, read_archive, read_result, read_trajectory, write_archive, write_cloud, write_result,
    write_trajectory, Cloud, ResultFile,
};
use rigcal_core::loss::LossWeights;
use rigcal_core::optimize::{closed_form, metric_cloud, solve, CameraFlags, CameraResult, OptimizerConfig, ViewResult};
use rigcal_core::scene::SceneInputs;
use rigcal_core::synth::{generate, preset, Scenario, ScenarioConfig};
use rigcal_core::Error;

/// Joint camera-to-robot calibration from dense pointmaps.
#[derive(Debug, Parser)]
#[command(name = "rigcal", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate cameras and reconstruct the scene from an archive.
    Calibrate(SolveArgs),
    /// Closed-form hand-eye baseline on the same inputs, without descent.
    Baseline(SolveArgs),
    /// Generate a synthetic archive with its trajectory and ground truth.
    Simulate(SimulateArgs),
    /// Compare a result with ground truth.
    Evaluate(EvaluateArgs),
    /// Rebuild the metric point cloud of a result.
    ExportCloud(ExportArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Input archive directory.
    #[arg(long)]
    archive: PathBuf,
    /// Robot trajectory file.
    #[arg(long)]
    trajectory: PathBuf,
    /// Result file to write; the cloud goes next to it with a `.ply` extension.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground truth to report errors against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Seed of the ground-plane consensus.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the intrinsics at their initial values.
    #[arg(long)]
    freeze_intrinsics: bool,
    /// Disable the cross-camera rigidity term.
    #[arg(long)]
    no_cross_loss: bool,
    /// Loss weights as `w3d,w2d,wcal,wcross`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<LossWeights>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory: archive plus `trajectory.txt` and `truth.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Scenario settings (TOML); an optional `preset` key picks the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when the config names none.
    #[arg(long, default_value = "franka-like")]
    preset: String,
    /// Scenario seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Archive with checkerboard corners, for the metric-scale check.
    #[arg(long)]
    archive: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    result: PathBuf,
    /// Archive the result was computed from.
    #[arg(long)]
    archive: PathBuf,
    /// PLY file to write.
    #[arg(long)]
    out: PathBuf,
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("{x:?} is not a number")))
        .collect::<Result<_, _>>()?;
    let [w3d, w2d, wcal, wcross]: [f64; 4] = v
        .try_into()
        .map_err(|_| "expected four comma-separated weights".to_string())?;
    if [w3d, w2d, wcal, wcross].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err("weights must be finite and non-negative".into());
    }
    Ok(LossWeights { w3d, w2d, wcal, wcross })
}

fn read_toml(path: &Path) -> Result<toml::Table, Error> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn optimizer_config(args: &SolveArgs) -> Result<OptimizerConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => toml::Value::Table(read_toml(p)?)
            .try_into::<OptimizerConfig>()
            .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?,
        None => OptimizerConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.freeze_intrinsics {
        cfg.refine_intrinsics = false;
    }
    if args.no_cross_loss {
        cfg.cross_loss = false;
    }
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn scenario_config(args: &SimulateArgs) -> Result<ScenarioConfig, Error> {
    let mut over = match &args.config {
        Some(p) => read_toml(p)?,
        None => toml::Table::new(),
    };
    let name = match over.remove("preset") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(Error::Parse("preset must be a string".into())),
        None => args.preset.clone(),
    };
    let base = preset(&name)?;
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Parse(e.to_string()))?;
    merge(&mut table, over);
    let mut cfg: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Parse(format!("scenario config: {e}")))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn truth_file(s: &Scenario) -> ResultFile {
    let t = &s.truth;
    let cameras = (0..t.extrinsics.len())
        .map(|j| CameraResult {
            extrinsics: t.extrinsics[j],
            lambda: t.lambda[j],
            motion_scale: t.lambda[j],
            intrinsics: t.intrinsics,
            cal_residual: 0.0,
            flags: CameraFlags::default(),
        })
        .collect();
    let anchor_lambda = t.lambda[s.inputs.views[0].camera];
    let views = s
        .inputs
        .views
        .iter()
        .map(|v| ViewResult {
            camera: v.camera,
            pose_index: v.pose_index,
            pose: t.view_poses[v.id],
            sigma: t.lambda[v.camera] / anchor_lambda,
            depth_scale: t.lambda[v.camera],
            anchor: 0,
        })
        .collect();
    ResultFile {
        cameras,
        views,
        robot_poses: t.trajectory.poses().to_vec(),
        ground_plane: Some(rigcal_core::ground::PlaneModel {
            normal: t.ground_plane.0,
            offset: t.ground_plane.1,
        }),
        loss: None,
        warnings: Vec::new(),
    }
}

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let cfg = scenario_config(args)?;
    let s = generate(&cfg)?;
    write_archive(&args.out, &s.inputs)?;
    write_trajectory(&args.out.join("trajectory.txt"), &s.trajectory)?;
    write_result(&args.out.join("truth.txt"), &truth_file(&s))?;
    println!(
        "wrote {} views of {} camera(s) at {} poses, {} match sets to {}",
        s.inputs.views.len(),
        cfg.cameras,
        cfg.poses,
        s.inputs.matches.len(),
        args.out.display()
    );
    Ok(())
}

fn print_cameras(r: &ResultFile) {
    for (j, c) in r.cameras.iter().enumerate() {
        let t = c.extrinsics.translation;
        println!(
            "camera {j}: t = [{:.4}, {:.4}, {:.4}] m, rotation {:.4} rad, lambda {:.5}, motion scale {:.5}",
            t.x,
            t.y,
            t.z,
            c.extrinsics.rotation.angle(),
            c.lambda,
            c.motion_scale
        );
        let k = &c.intrinsics;
        println!(
            "  intrinsics fx {:.3} fy {:.3} cx {:.3} cy {:.3}, hand-eye residual {:.3e}",
            k.fx, k.fy, k.cx, k.cy, c.cal_residual
        );
        let f = &c.flags;
        if f.z_unobservable {
            match f.z_recovered {
                Some((h, s)) => println!("  translation along the rotation axis from the floor: {h:.4} m (spread {s:.4})"),
                None => println!("  translation along the rotation axis is unobservable"),
            }
        }
        for (on, text) in [
            (f.extrinsics_fallback, "closed-form hand-eye failed; started at identity"),
            (f.lambda_fallback, "metric scale not observable from motion"),
            (f.intrinsics_estimated, "intrinsics estimated from the pointmaps"),
            (f.scale_disagreement, "motion scales disagree within its component"),
        ] {
            if on {
                println!("  note: {text}");
            }
        }
    }
}

fn print_errors(est: &ResultFile, truth: &ResultFile) -> Result<(), Error> {
    let (et, etheta) = calib_errors(&est.extrinsics(), &truth.extrinsics())?;
    println!("e_t {:.4e} m, e_theta {:.4e} rad ({:.4e} deg)", et, etheta, etheta.to_degrees());
    for (j, (a, b)) in est.cameras.iter().zip(&truth.cameras).enumerate() {
        println!(
            "  camera {j}: translation error {:.4e} m, rotation error {:.4e} rad, lambda error {:.4}%",
            (a.extrinsics.translation - b.extrinsics.translation).norm(),
            rotation_angle(&a.extrinsics.rotation, &b.extrinsics.rotation),
            (a.lambda / b.lambda - 1.0) * 100.0
        );
    }
    Ok(())
}

fn solve_command(args: &SolveArgs, descent: bool) -> Result<(), Error> {
    let cfg = optimizer_config(args)?;
    let inputs = read_archive(&args.archive)?;
    let traj = read_trajectory(&args.trajectory)?;
    let start = Instant::now();
    let result = if descent {
        solve(&inputs, &traj.trajectory, &cfg)?
    } else {
        closed_form(&inputs, &traj.trajectory, &cfg)?
    };
    let mut file = ResultFile::from(&result);
    file.warnings.splice(0..0, traj.warnings);
    write_result(&args.out, &file)?;
    let cloud_path = cloud_path_for(&args.out);
    write_cloud(&cloud_path, &Cloud::new(result.cloud.clone(), &result.robot_poses, &result.views))?;
    println!(
        "{} views, {} camera(s), {:.2} s",
        inputs.views.len(),
        result.cameras.len(),
        start.elapsed().as_secs_f64()
    );
    if descent {
        println!(
            "loss {:.6e} -> {:.6e} after {} iterations ({:?})",
            result.log.initial_loss,
            result.log.final_loss,
            result.log.records.len(),
            result.log.termination
        );
    }
    print_cameras(&file);
    for w in &file.warnings {
        println!("warning: {w}");
    }
    if let Some(t) = &args.truth {
        print_errors(&file, &read_result(t)?)?;
    }
    println!("result: {}, cloud: {}", args.out.display(), cloud_path.display());
    Ok(())
}

fn board_scale(result: &ResultFile, inputs: &SceneInputs) -> Result<Option<ScaleAccuracy>, Error> {
    let Some(board) = &inputs.board else {
        return Ok(None);
    };
    if result.views.len() != inputs.views.len() {
        return Err(Error::LengthMismatch(result.views.len(), inputs.views.len()));
    }
    let records = inputs.view_records()?;
    let mut detections = Vec::new();
    for (rec, view) in records.iter().zip(&inputs.views) {
        let Some(corners) = &view.corners else { continue };
        let vr = &result.views[rec.id];
        let k = &result.cameras[vr.camera].intrinsics;
        if let Some(points) = lift_corners(rec, corners, k, &vr.pose, vr.depth_scale)? {
            detections.push(points);
        }
    }
    scale_accuracy(&detections, board).map(Some)
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let est = read_result(&args.result)?;
    let truth = read_result(&args.truth)?;
    print_errors(&est, &truth)?;
    if let Some(dir) = &args.archive {
        let inputs = read_archive(dir)?;
        match board_scale(&est, &inputs)? {
            Some(s) => {
                let square = inputs.board.as_ref().map(|b| b.square).unwrap_or_default();
                println!(
                    "board square {:.5} m: mean {:.5} m, std {:.5} m, scale error {:.3}%",
                    square, s.mean, s.std, s.error_percent
                );
            }
            None => println!("archive has no checkerboard; scale check skipped"),
        }
    }
    Ok(())
}

fn export(args: &ExportArgs) -> Result<(), Error> {
    let result = read_result(&args.result)?;
    let inputs = read_archive(&args.archive)?;
    if result.views.len() != inputs.views.len() {
        return Err(Error::LengthMismatch(result.views.len(), inputs.views.len()));
    }
    let records = inputs.view_records()?;
    let points = metric_cloud(&records, &result.views, &result.intrinsics());
    let count = points.len();
    write_cloud(&args.out, &Cloud::new(points, &result.robot_poses, &result.views))?;
    println!("wrote {count} points to {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        info!("using {n} threads");
    }
    match &cli.command {
        Command::Calibrate(a) => solve_command(a, true),
        Command::Baseline(a) => solve_command(a, false),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportCloud(a) => export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
