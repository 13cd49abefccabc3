//! On-disk formats: input archives, robot trajectories, calibration results
//! and point clouds.
//!
//! # Archive
//!
//! A directory with a text `manifest.txt` and headerless binary channels.
//! Every float channel is little-endian IEEE-754 `f32`, row-major and
//! contiguous. Masks are one byte per pixel, `0` or `1`.
//!
//! ```text
//! rigcal-archive 1
//! board rows=7 cols=10 square=0.03
//! view id=0 camera=0 pose=0 width=64 height=48 estimates=1 channels=mask,corners intrinsics=48,48,31.5,23.5
//! matches a=0 b=1 count=12
//! ```
//!
//! | file | contents | bytes |
//! |---|---|---|
//! | `view_<id>_est<e>_points.bin` | `x y z` per pixel | `12 w h` |
//! | `view_<id>_est<e>_conf.bin` | confidence per pixel, `0` = invalid | `4 w h` |
//! | `view_<id>_mask.bin` | floor flag per pixel | `w h` |
//! | `view_<id>_corners.bin` | `u v` per board corner, row-major | `8 rows cols` |
//! | `matches_<a>_<b>.bin` | `u_a v_a u_b v_b q` per match | `20 count` |
//! | `scores.bin` | `n x n` co-visibility matrix | `4 n n` |
//!
//! Views are listed in id order `0..n`. The `channels` key lists the
//! optional per-view channels (`none` when absent); `intrinsics` is the
//! optional prior `fx,fy,cx,cy` in pixels. Numbers in the manifest are
//! decimal text that round-trips exactly.
//!
//! In memory every value is `f64`; writing rounds to `f32`, so
//! `read_archive(write_archive(x)) == x` holds exactly for inputs whose
//! values are `f32`-representable (see [`quantize_inputs`]).
//!
//! # Trajectory
//!
//! One pose per line: the pose index followed by the 12 numbers of the
//! row-major 3x4 matrix `[R | t]` of `T^{R_0}_{R_i}`. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::BoardSpec;
use crate::geometry::{nearest_rotation, Intrinsics, RigidTransform};
use crate::graph::CovisibilityMatrix;
use crate::ground::PlaneModel;
use crate::loss::RobotTrajectory;
use crate::optimize::{CalibrationResult, CameraFlags, CameraResult, ViewResult};
use crate::pointmap::{GroundMask, MatchPair, MatchSet, Pointmap};
use crate::scene::{SceneInputs, ViewData};

pub const ARCHIVE_MAGIC: &str = "rigcal-archive 1";
pub const RESULT_MAGIC: &str = "rigcal-result 1";
pub const MANIFEST: &str = "manifest.txt";

/// Largest `|R^T R - I|_F` that is repaired by re-orthonormalization.
pub const MAX_ROTATION_DRIFT: f64 = 1e-3;
/// Drift below this is left untouched.
const NEGLIGIBLE_DRIFT: f64 = 1e-12;
/// Largest deviation of the first pose from the identity that is forced
/// to the identity.
pub const FIRST_POSE_TOLERANCE: f64 = 1e-6;

fn points_file(id: usize, e: usize) -> String {
    format!("view_{id}_est{e}_points.bin")
}

fn conf_file(id: usize, e: usize) -> String {
    format!("view_{id}_est{e}_conf.bin")
}

fn mask_file(id: usize) -> String {
    format!("view_{id}_mask.bin")
}

fn corners_file(id: usize) -> String {
    format!("view_{id}_corners.bin")
}

fn matches_file(a: usize, b: usize) -> String {
    format!("matches_{a}_{b}.bin")
}

const SCORES_FILE: &str = "scores.bin";

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptBinary {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_bytes(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingChannel(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.len() != expected {
        return Err(corrupt(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Reads exactly `count` little-endian floats.
fn read_f32(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(path, count * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn require_finite(path: &Path, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(corrupt(path, format!("non-finite value at float {i} (wrong byte order?)"))),
        None => Ok(()),
    }
}

/// Rounds every stored value to `f32` precision, the precision of the
/// archive channels.
pub fn quantize_inputs(inputs: &SceneInputs) -> SceneInputs {
    let q = |v: f64| v as f32 as f64;
    let q2 = |p: &Vector2<f64>| Vector2::new(q(p.x), q(p.y));
    let mut out = inputs.clone();
    for v in &mut out.views {
        for e in &mut v.estimates {
            e.points.iter_mut().for_each(|p| *p = p.map(q));
            e.confidence.iter_mut().for_each(|c| *c = q(*c));
        }
        if let Some(c) = &mut v.corners {
            c.iter_mut().for_each(|p| *p = q2(p));
        }
    }
    for m in &mut out.matches {
        for p in &mut m.pairs {
            p.pixel_a = q2(&p.pixel_a);
            p.pixel_b = q2(&p.pixel_b);
            p.weight = q(p.weight);
        }
    }
    let n = inputs.scores.len();
    out.scores = CovisibilityMatrix::new(n, inputs.scores.as_slice().iter().map(|s| q(*s)).collect())
        .expect("rounding keeps a valid score matrix valid");
    out
}

/// Writes an archive directory, creating it if needed.
pub fn write_archive(dir: &Path, inputs: &SceneInputs) -> Result<()> {
    inputs.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "{ARCHIVE_MAGIC}").unwrap();
    if let Some(b) = &inputs.board {
        writeln!(manifest, "board rows={} cols={} square={}", b.rows, b.cols, b.square).unwrap();
    }
    for v in &inputs.views {
        let mut channels = Vec::new();
        if v.ground_mask.is_some() {
            channels.push("mask");
        }
        if v.corners.is_some() {
            channels.push("corners");
        }
        let channels = if channels.is_empty() { "none".to_string() } else { channels.join(",") };
        write!(
            manifest,
            "view id={} camera={} pose={} width={} height={} estimates={} channels={channels}",
            v.id,
            v.camera,
            v.pose_index,
            v.width,
            v.height,
            v.estimates.len()
        )
        .unwrap();
        if let Some(k) = &v.intrinsics_prior {
            write!(manifest, " intrinsics={},{},{},{}", k.fx, k.fy, k.cx, k.cy).unwrap();
        }
        manifest.push('\n');
    }
    for m in &inputs.matches {
        writeln!(manifest, "matches a={} b={} count={}", m.view_a, m.view_b, m.pairs.len()).unwrap();
    }

    inputs.views.par_iter().try_for_each(|v| -> Result<()> {
        for (e, est) in v.estimates.iter().enumerate() {
            write_f32(&dir.join(points_file(v.id, e)), est.points.iter().flat_map(|p| [p.x, p.y, p.z]))?;
            write_f32(&dir.join(conf_file(v.id, e)), est.confidence.iter().copied())?;
        }
        if let Some(m) = &v.ground_mask {
            let bytes: Vec<u8> = m.floor.iter().map(|&f| f as u8).collect();
            fs::write(dir.join(mask_file(v.id)), bytes)?;
        }
        if let Some(c) = &v.corners {
            write_f32(&dir.join(corners_file(v.id)), c.iter().flat_map(|p| [p.x, p.y]))?;
        }
        Ok(())
    })?;
    for m in &inputs.matches {
        write_f32(
            &dir.join(matches_file(m.view_a, m.view_b)),
            m.pairs
                .iter()
                .flat_map(|p| [p.pixel_a.x, p.pixel_a.y, p.pixel_b.x, p.pixel_b.y, p.weight]),
        )?;
    }
    write_f32(&dir.join(SCORES_FILE), inputs.scores.as_slice().iter().copied())?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

struct ViewEntry {
    id: usize,
    camera: usize,
    pose_index: usize,
    width: usize,
    height: usize,
    estimates: usize,
    mask: bool,
    corners: bool,
    intrinsics: Option<[f64; 4]>,
}

struct MatchEntry {
    a: usize,
    b: usize,
    count: usize,
}

struct Manifest {
    board: Option<BoardSpec>,
    views: Vec<ViewEntry>,
    matches: Vec<MatchEntry>,
}

/// `key=value` tokens of one manifest line.
struct Fields<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, tokens: &[&'a str]) -> Result<Self> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| Error::MalformedLine {
                line,
                reason: format!("manifest token {t:?} is not key=value"),
            })?;
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::MalformedLine {
                    line,
                    reason: format!("manifest key {k:?} repeated"),
                });
            }
            pairs.push((k, v));
        }
        Ok(Self { line, pairs })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key).ok_or_else(|| Error::MalformedLine {
            line: self.line,
            reason: format!("manifest key {key:?} missing"),
        })?;
        v.parse().map_err(|_| Error::MalformedLine {
            line: self.line,
            reason: format!("manifest value {key}={v:?} is invalid"),
        })
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.pairs.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(Error::MalformedLine {
                line: self.line,
                reason: format!("unknown manifest key {k:?}"),
            }),
            None => Ok(()),
        }
    }
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l == ARCHIVE_MAGIC => {}
        Some((line, l)) => {
            return Err(Error::MalformedLine {
                line,
                reason: format!("expected {ARCHIVE_MAGIC:?}, found {l:?}"),
            })
        }
        None => return Err(Error::Parse("empty manifest".into())),
    }
    let mut m = Manifest {
        board: None,
        views: Vec::new(),
        matches: Vec::new(),
    };
    for (line, l) in lines {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        let f = Fields::parse(line, &tokens[1..])?;
        match tokens[0] {
            "board" => {
                f.only(&["rows", "cols", "square"])?;
                let board = BoardSpec {
                    rows: f.get("rows")?,
                    cols: f.get("cols")?,
                    square: f.get("square")?,
                };
                if board.rows < 2 || board.cols < 2 || !(board.square > 0.0 && board.square.is_finite()) {
                    return Err(Error::MalformedLine {
                        line,
                        reason: "board needs at least 2x2 corners and a positive square size".into(),
                    });
                }
                m.board = Some(board);
            }
            "view" => {
                f.only(&["id", "camera", "pose", "width", "height", "estimates", "channels", "intrinsics"])?;
                let channels: String = f.get("channels")?;
                let (mut mask, mut corners) = (false, false);
                for c in channels.split(',') {
                    match c {
                        "mask" => mask = true,
                        "corners" => corners = true,
                        "none" => {}
                        other => {
                            return Err(Error::MalformedLine {
                                line,
                                reason: format!("unknown channel {other:?}"),
                            })
                        }
                    }
                }
                let intrinsics = match f.raw("intrinsics") {
                    None => None,
                    Some(v) => {
                        let nums: Vec<f64> = v
                            .split(',')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::MalformedLine {
                                line,
                                reason: format!("invalid intrinsics {v:?}"),
                            })?;
                        let arr: [f64; 4] = nums.try_into().map_err(|_| Error::MalformedLine {
                            line,
                            reason: "intrinsics need fx,fy,cx,cy".into(),
                        })?;
                        Some(arr)
                    }
                };
                m.views.push(ViewEntry {
                    id: f.get("id")?,
                    camera: f.get("camera")?,
                    pose_index: f.get("pose")?,
                    width: f.get("width")?,
                    height: f.get("height")?,
                    estimates: f.get("estimates")?,
                    mask,
                    corners,
                    intrinsics,
                });
            }
            "matches" => {
                f.only(&["a", "b", "count"])?;
                m.matches.push(MatchEntry {
                    a: f.get("a")?,
                    b: f.get("b")?,
                    count: f.get("count")?,
                });
            }
            other => {
                return Err(Error::MalformedLine {
                    line,
                    reason: format!("unknown manifest record {other:?}"),
                })
            }
        }
    }
    Ok(m)
}

fn read_view(dir: &Path, e: &ViewEntry, board: Option<&BoardSpec>) -> Result<ViewData> {
    let n = e.width * e.height;
    if n == 0 {
        return Err(Error::DimensionMismatch(format!("view {} has an empty image", e.id)));
    }
    if e.estimates == 0 {
        return Err(Error::MissingChannel(format!("view {} declares no pointmap estimate", e.id)));
    }
    let mut estimates = Vec::with_capacity(e.estimates);
    for k in 0..e.estimates {
        let ppath = dir.join(points_file(e.id, k));
        let cpath = dir.join(conf_file(e.id, k));
        let raw = read_f32(&ppath, 3 * n)?;
        let confidence = read_f32(&cpath, n)?;
        require_finite(&cpath, &confidence)?;
        if let Some(i) = confidence.iter().position(|c| *c < 0.0) {
            return Err(corrupt(&cpath, format!("negative confidence at pixel {i}")));
        }
        let points: Vec<Vector3<f64>> = raw.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        if let Some(i) = (0..n).find(|&i| confidence[i] > 0.0 && !points[i].iter().all(|x| x.is_finite())) {
            return Err(corrupt(&ppath, format!("non-finite point at valid pixel {i} (wrong byte order?)")));
        }
        estimates.push(Pointmap {
            width: e.width,
            height: e.height,
            points,
            confidence,
        });
    }
    let ground_mask = if e.mask {
        let path = dir.join(mask_file(e.id));
        let bytes = read_bytes(&path, n)?;
        if let Some(i) = bytes.iter().position(|b| *b > 1) {
            return Err(corrupt(&path, format!("mask byte {} at pixel {i} is not 0 or 1", bytes[i])));
        }
        Some(GroundMask {
            width: e.width,
            height: e.height,
            floor: bytes.iter().map(|b| *b == 1).collect(),
        })
    } else {
        None
    };
    let corners = if e.corners {
        let board = board.ok_or_else(|| {
            Error::DimensionMismatch(format!("view {} has corners but the manifest has no board", e.id))
        })?;
        let path = dir.join(corners_file(e.id));
        let raw = read_f32(&path, 2 * board.rows * board.cols)?;
        require_finite(&path, &raw)?;
        Some(raw.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect())
    } else {
        None
    };
    let intrinsics_prior = e
        .intrinsics
        .map(|[fx, fy, cx, cy]| Intrinsics::new(fx, fy, cx, cy, e.width, e.height))
        .transpose()?;
    Ok(ViewData {
        id: e.id,
        camera: e.camera,
        pose_index: e.pose_index,
        width: e.width,
        height: e.height,
        estimates,
        intrinsics_prior,
        ground_mask,
        corners,
    })
}

/// Reads and fully validates an archive directory.
pub fn read_archive(dir: &Path) -> Result<SceneInputs> {
    let mpath = dir.join(MANIFEST);
    let text = match fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingChannel(mpath.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let manifest = parse_manifest(&text)?;
    let nv = manifest.views.len();
    for (i, v) in manifest.views.iter().enumerate() {
        if v.id != i {
            return Err(Error::Parse(format!("manifest views must be listed as ids 0..n, found {} at {i}", v.id)));
        }
    }
    for m in &manifest.matches {
        for id in [m.a, m.b] {
            if id >= nv {
                return Err(Error::MissingChannel(format!(
                    "matches_{}_{} reference absent view {id}",
                    m.a, m.b
                )));
            }
        }
    }
    let views: Vec<ViewData> = manifest
        .views
        .par_iter()
        .map(|e| read_view(dir, e, manifest.board.as_ref()))
        .collect::<Result<_>>()?;
    let matches: Vec<MatchSet> = manifest
        .matches
        .par_iter()
        .map(|m| -> Result<MatchSet> {
            let path = dir.join(matches_file(m.a, m.b));
            let raw = read_f32(&path, 5 * m.count)?;
            require_finite(&path, &raw)?;
            let pairs = raw
                .chunks_exact(5)
                .map(|c| MatchPair {
                    pixel_a: Vector2::new(c[0], c[1]),
                    pixel_b: Vector2::new(c[2], c[3]),
                    weight: c[4],
                })
                .collect();
            Ok(MatchSet {
                view_a: m.a,
                view_b: m.b,
                pairs,
            })
        })
        .collect::<Result<_>>()?;
    let spath = dir.join(SCORES_FILE);
    let raw = read_f32(&spath, nv * nv)?;
    require_finite(&spath, &raw)?;
    let scores = CovisibilityMatrix::new(nv, raw).map_err(|e| corrupt(&spath, e.to_string()))?;
    let inputs = SceneInputs {
        views,
        matches,
        scores,
        board: manifest.board,
    };
    inputs.validate()?;
    Ok(inputs)
}

/// Parsed trajectory plus the repairs applied while reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub trajectory: RobotTrajectory,
    /// Validated rows as stored: repaired rotations and the forced identity
    /// are substituted, everything else is kept bit for bit.
    pub rows: Vec<[f64; 12]>,
    pub warnings: Vec<String>,
}

fn numbers(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedLine {
                    line,
                    reason: format!("{t:?} is not a finite number"),
                })
        })
        .collect()
}

/// Parses trajectory text.
pub fn parse_trajectory(text: &str) -> Result<TrajectoryFile> {
    let mut poses = Vec::new();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut tokens = l.split_whitespace();
        let first = tokens.next().expect("non-empty line");
        let index: usize = first.parse().map_err(|_| Error::MalformedLine {
            line,
            reason: format!("pose index {first:?} is not a non-negative integer"),
        })?;
        let vals = numbers(line, &tokens.collect::<Vec<_>>().join(" "))?;
        let vals: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| Error::MalformedLine {
            line,
            reason: format!("expected 12 numbers after the index, found {}", v.len()),
        })?;
        if index != poses.len() {
            return Err(Error::MalformedLine {
                line,
                reason: format!("expected pose index {}, found {index}", poses.len()),
            });
        }
        let r = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        let det = r.determinant();
        if det <= 0.0 {
            return Err(Error::NonRigidRotation {
                line,
                reason: format!("determinant {det:.6} is not positive"),
            });
        }
        let drift = (r.transpose() * r - Matrix3::identity()).norm();
        if drift > MAX_ROTATION_DRIFT {
            return Err(Error::NonRigidRotation {
                line,
                reason: format!("orthonormality drift {drift:.3e} exceeds {MAX_ROTATION_DRIFT:e}"),
            });
        }
        let mut row = vals;
        if drift > NEGLIGIBLE_DRIFT {
            warnings.push(format!("pose {index}: rotation re-orthonormalized (drift {drift:.3e})"));
            let fixed = nearest_rotation(&r);
            for a in 0..3 {
                for b in 0..3 {
                    row[a * 4 + b] = fixed[(a, b)];
                }
            }
        }
        if index == 0 {
            let dev = vals
                .iter()
                .zip(RigidTransform::identity().to_row_major_3x4())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dev > FIRST_POSE_TOLERANCE {
                return Err(Error::FirstPoseNotIdentity(dev));
            }
            if dev > 0.0 {
                warnings.push(format!("first pose deviates from the identity by {dev:.3e}; set to identity"));
            }
            row = RigidTransform::identity().to_row_major_3x4();
        }
        poses.push(if index == 0 {
            RigidTransform::identity()
        } else {
            RigidTransform::from_row_major_3x4(&row)
        });
        rows.push(row);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(TrajectoryFile {
        trajectory: RobotTrajectory::new(poses)?,
        rows,
        warnings,
    })
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile> {
    parse_trajectory(&fs::read_to_string(path)?)
}

fn push_numbers(out: &mut String, vals: &[f64]) {
    for v in vals {
        write!(out, " {v}").unwrap();
    }
}

/// Trajectory text from rows; reading it back returns the same rows bit
/// for bit.
pub fn format_rows(rows: &[[f64; 12]]) -> String {
    let mut out = String::from("# index, then row-major [R | t] of T^{R_0}_{R_i}\n");
    for (i, row) in rows.iter().enumerate() {
        write!(out, "{i}").unwrap();
        push_numbers(&mut out, row);
        out.push('\n');
    }
    out
}

pub fn format_trajectory(traj: &RobotTrajectory) -> String {
    let rows: Vec<[f64; 12]> = traj.poses().iter().map(RigidTransform::to_row_major_3x4).collect();
    format_rows(&rows)
}

pub fn write_trajectory(path: &Path, traj: &RobotTrajectory) -> Result<()> {
    fs::write(path, format_trajectory(traj))?;
    Ok(())
}

/// Optimizer bookkeeping stored with a result.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSummary {
    pub initial: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub termination: String,
}

/// The part of a calibration that is written to the result file. Ground
/// truth uses the same layout with `loss` absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultFile {
    pub cameras: Vec<CameraResult>,
    pub views: Vec<ViewResult>,
    pub robot_poses: Vec<RigidTransform>,
    pub ground_plane: Option<PlaneModel>,
    pub loss: Option<LossSummary>,
    pub warnings: Vec<String>,
}

impl From<&CalibrationResult> for ResultFile {
    fn from(r: &CalibrationResult) -> Self {
        Self {
            cameras: r.cameras.clone(),
            views: r.views.clone(),
            robot_poses: r.robot_poses.clone(),
            ground_plane: r.ground_plane,
            loss: Some(LossSummary {
                initial: r.log.initial_loss,
                final_loss: r.log.final_loss,
                iterations: r.log.records.len(),
                best_iteration: r.log.best_iteration,
                termination: format!("{:?}", r.log.termination),
            }),
            warnings: r.warnings.clone(),
        }
    }
}

impl ResultFile {
    pub fn extrinsics(&self) -> Vec<RigidTransform> {
        self.cameras.iter().map(|c| c.extrinsics).collect()
    }

    pub fn intrinsics(&self) -> Vec<Intrinsics> {
        self.cameras.iter().map(|c| c.intrinsics).collect()
    }
}

const FLAG_NAMES: [&str; 5] = [
    "z_unobservable",
    "extrinsics_fallback",
    "lambda_fallback",
    "intrinsics_estimated",
    "scale_disagreement",
];

fn flag_values(f: &CameraFlags) -> [bool; 5] {
    [
        f.z_unobservable,
        f.extrinsics_fallback,
        f.lambda_fallback,
        f.intrinsics_estimated,
        f.scale_disagreement,
    ]
}

pub fn format_result(r: &ResultFile) -> String {
    let mut out = format!("{RESULT_MAGIC}\n");
    writeln!(out, "cameras {}", r.cameras.len()).unwrap();
    writeln!(out, "views {}", r.views.len()).unwrap();
    if let Some(l) = &r.loss {
        writeln!(out, "loss {} {}", l.initial, l.final_loss).unwrap();
        writeln!(out, "iterations {} {}", l.iterations, l.best_iteration).unwrap();
        writeln!(out, "termination {}", l.termination).unwrap();
    }
    if let Some(p) = &r.ground_plane {
        write!(out, "ground_plane").unwrap();
        push_numbers(&mut out, &[p.normal.x, p.normal.y, p.normal.z, p.offset]);
        out.push('\n');
    }
    for w in &r.warnings {
        writeln!(out, "warning {}", w.replace('\n', " ")).unwrap();
    }
    for (i, p) in r.robot_poses.iter().enumerate() {
        write!(out, "robot {i}").unwrap();
        push_numbers(&mut out, &p.to_row_major_3x4());
        out.push('\n');
    }
    for (j, c) in r.cameras.iter().enumerate() {
        writeln!(out, "\ncamera {j}").unwrap();
        write!(out, "extrinsics").unwrap();
        push_numbers(&mut out, &c.extrinsics.to_row_major_3x4());
        writeln!(out, "\nlambda {}", c.lambda).unwrap();
        writeln!(out, "motion_scale {}", c.motion_scale).unwrap();
        let k = &c.intrinsics;
        writeln!(out, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).unwrap();
        writeln!(out, "cal_residual {}", c.cal_residual).unwrap();
        let set: Vec<&str> = FLAG_NAMES
            .iter()
            .zip(flag_values(&c.flags))
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        writeln!(out, "flags {}", if set.is_empty() { "none".to_string() } else { set.join(",") }).unwrap();
        if let Some((mean, std)) = c.flags.z_recovered {
            writeln!(out, "z_recovered {mean} {std}").unwrap();
        }
    }
    for (v, vr) in r.views.iter().enumerate() {
        writeln!(out, "\nview {v}").unwrap();
        writeln!(out, "camera {}", vr.camera).unwrap();
        writeln!(out, "pose_index {}", vr.pose_index).unwrap();
        write!(out, "pose").unwrap();
        push_numbers(&mut out, &vr.pose.to_row_major_3x4());
        writeln!(out, "\nsigma {}", vr.sigma).unwrap();
        writeln!(out, "depth_scale {}", vr.depth_scale).unwrap();
        writeln!(out, "anchor {}", vr.anchor).unwrap();
    }
    out
}

#[derive(Default)]
struct CameraBuilder {
    extrinsics: Option<RigidTransform>,
    lambda: Option<f64>,
    motion_scale: Option<f64>,
    intrinsics: Option<Intrinsics>,
    cal_residual: Option<f64>,
    flags: CameraFlags,
}

#[derive(Default)]
struct ViewBuilder {
    camera: Option<usize>,
    pose_index: Option<usize>,
    pose: Option<RigidTransform>,
    sigma: Option<f64>,
    depth_scale: Option<f64>,
    anchor: Option<usize>,
}

enum Block {
    Header,
    Camera(usize),
    View(usize),
}

fn missing(what: &str, block: &str) -> Error {
    Error::Parse(format!("result file: {block} lacks {what:?}"))
}

/// Parses a result (or ground-truth) file.
pub fn parse_result(text: &str) -> Result<ResultFile> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut lines = std::iter::from_fn(move || lines.find(|(_, l)| !l.is_empty() && !l.starts_with('#')));
    match lines.next() {
        Some((_, l)) if l == RESULT_MAGIC => {}
        Some((line, l)) => {
            return Err(Error::MalformedLine {
                line,
                reason: format!("expected {RESULT_MAGIC:?}, found {l:?}"),
            })
        }
        None => return Err(Error::Parse("empty result file".into())),
    }
    let mut cameras: Vec<CameraBuilder> = Vec::new();
    let mut views: Vec<ViewBuilder> = Vec::new();
    let mut robot = Vec::new();
    let mut plane = None;
    let mut loss: Option<LossSummary> = None;
    let mut warnings = Vec::new();
    let mut block = Block::Header;
    for (line, l) in lines {
        let (key, rest) = l.split_once(char::is_whitespace).unwrap_or((l, ""));
        let rest = rest.trim();
        let bad = |reason: String| Error::MalformedLine { line, reason };
        let nums = |n: usize| -> Result<Vec<f64>> {
            let v = numbers(line, rest)?;
            if v.len() != n {
                return Err(Error::MalformedLine {
                    line,
                    reason: format!("{key} needs {n} numbers, found {}", v.len()),
                });
            }
            Ok(v)
        };
        let int = || -> Result<usize> {
            rest.parse().map_err(|_| Error::MalformedLine {
                line,
                reason: format!("{key} needs a non-negative integer"),
            })
        };
        let pose = || -> Result<RigidTransform> {
            let v: [f64; 12] = nums(12)?.try_into().expect("length checked");
            Ok(RigidTransform::from_row_major_3x4(&v))
        };
        if key == "camera" && !matches!(block, Block::View(_)) || key == "view" {
            let idx = int()?;
            let expected = if key == "camera" { cameras.len() } else { views.len() };
            if idx != expected {
                return Err(bad(format!("expected {key} {expected}, found {idx}")));
            }
            if key == "camera" {
                cameras.push(CameraBuilder::default());
                block = Block::Camera(idx);
            } else {
                views.push(ViewBuilder::default());
                block = Block::View(idx);
            }
            continue;
        }
        match block {
            Block::Header => match key {
                "cameras" | "views" => {
                    int()?;
                }
                "loss" => {
                    let v = nums(2)?;
                    let l = loss.get_or_insert_with(|| LossSummary {
                        initial: 0.0,
                        final_loss: 0.0,
                        iterations: 0,
                        best_iteration: 0,
                        termination: String::new(),
                    });
                    l.initial = v[0];
                    l.final_loss = v[1];
                }
                "iterations" => {
                    let parts: Vec<usize> = rest
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("iterations needs two integers".into()))?;
                    let [it, best]: [usize; 2] =
                        parts.try_into().map_err(|_| bad("iterations needs two integers".into()))?;
                    let l = loss.as_mut().ok_or_else(|| bad("iterations before loss".into()))?;
                    l.iterations = it;
                    l.best_iteration = best;
                }
                "termination" => {
                    let l = loss.as_mut().ok_or_else(|| bad("termination before loss".into()))?;
                    l.termination = rest.to_string();
                }
                "ground_plane" => {
                    let v = nums(4)?;
                    plane = Some(PlaneModel {
                        normal: Vector3::new(v[0], v[1], v[2]),
                        offset: v[3],
                    });
                }
                "warning" => warnings.push(rest.to_string()),
                "robot" => {
                    let (idx, tail) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                    if idx.parse::<usize>().ok() != Some(robot.len()) {
                        return Err(bad(format!("expected robot {}", robot.len())));
                    }
                    let v: [f64; 12] = numbers(line, tail)?
                        .try_into()
                        .map_err(|_| bad("robot needs an index and 12 numbers".into()))?;
                    robot.push(RigidTransform::from_row_major_3x4(&v));
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            },
            Block::Camera(j) => {
                let c = &mut cameras[j];
                match key {
                    "extrinsics" => c.extrinsics = Some(pose()?),
                    "lambda" => c.lambda = Some(nums(1)?[0]),
                    "motion_scale" => c.motion_scale = Some(nums(1)?[0]),
                    "cal_residual" => c.cal_residual = Some(nums(1)?[0]),
                    "intrinsics" => {
                        let v = nums(6)?;
                        let size = |x: f64| {
                            (x >= 0.0 && x.fract() == 0.0)
                                .then_some(x as usize)
                                .ok_or_else(|| bad("image size must be integral".into()))
                        };
                        c.intrinsics = Some(Intrinsics::new(v[0], v[1], v[2], v[3], size(v[4])?, size(v[5])?)?);
                    }
                    "flags" => {
                        for name in rest.split(',').filter(|n| *n != "none") {
                            let f = &mut c.flags;
                            match name {
                                "z_unobservable" => f.z_unobservable = true,
                                "extrinsics_fallback" => f.extrinsics_fallback = true,
                                "lambda_fallback" => f.lambda_fallback = true,
                                "intrinsics_estimated" => f.intrinsics_estimated = true,
                                "scale_disagreement" => f.scale_disagreement = true,
                                other => return Err(bad(format!("unknown flag {other:?}"))),
                            }
                        }
                    }
                    "z_recovered" => {
                        let v = nums(2)?;
                        c.flags.z_recovered = Some((v[0], v[1]));
                    }
                    other => return Err(bad(format!("unknown camera key {other:?}"))),
                }
            }
            Block::View(v) => {
                let b = &mut views[v];
                match key {
                    "camera" => b.camera = Some(int()?),
                    "pose_index" => b.pose_index = Some(int()?),
                    "anchor" => b.anchor = Some(int()?),
                    "pose" => b.pose = Some(pose()?),
                    "sigma" => b.sigma = Some(nums(1)?[0]),
                    "depth_scale" => b.depth_scale = Some(nums(1)?[0]),
                    other => return Err(bad(format!("unknown view key {other:?}"))),
                }
            }
        }
    }
    let cameras = cameras
        .into_iter()
        .enumerate()
        .map(|(j, c)| -> Result<CameraResult> {
            let name = format!("camera {j}");
            Ok(CameraResult {
                extrinsics: c.extrinsics.ok_or_else(|| missing("extrinsics", &name))?,
                lambda: c.lambda.ok_or_else(|| missing("lambda", &name))?,
                motion_scale: c.motion_scale.ok_or_else(|| missing("motion_scale", &name))?,
                intrinsics: c.intrinsics.ok_or_else(|| missing("intrinsics", &name))?,
                cal_residual: c.cal_residual.ok_or_else(|| missing("cal_residual", &name))?,
                flags: c.flags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let views = views
        .into_iter()
        .enumerate()
        .map(|(v, b)| -> Result<ViewResult> {
            let name = format!("view {v}");
            let camera = b.camera.ok_or_else(|| missing("camera", &name))?;
            if camera >= cameras.len() {
                return Err(Error::Parse(format!("result file: {name} references absent camera {camera}")));
            }
            Ok(ViewResult {
                camera,
                pose_index: b.pose_index.ok_or_else(|| missing("pose_index", &name))?,
                pose: b.pose.ok_or_else(|| missing("pose", &name))?,
                sigma: b.sigma.ok_or_else(|| missing("sigma", &name))?,
                depth_scale: b.depth_scale.ok_or_else(|| missing("depth_scale", &name))?,
                anchor: b.anchor.ok_or_else(|| missing("anchor", &name))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultFile {
        cameras,
        views,
        robot_poses: robot,
        ground_plane: plane,
        loss,
        warnings,
    })
}

pub fn read_result(path: &Path) -> Result<ResultFile> {
    parse_result(&fs::read_to_string(path)?)
}

pub fn write_result(path: &Path, r: &ResultFile) -> Result<()> {
    fs::write(path, format_result(r))?;
    Ok(())
}

/// Kind of a coordinate frame stored with a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    /// Robot pose `T^{R_0}_{R_i}`.
    Robot,
    /// Camera pose `T^{R_0}_{C_v}` of one view.
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub index: usize,
    pub pose: RigidTransform,
}

/// Points in `R_0` (meters) with the robot and camera frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub points: Vec<Vector3<f64>>,
    pub frames: Vec<Frame>,
}

impl Cloud {
    pub fn new(points: Vec<Vector3<f64>>, robot_poses: &[RigidTransform], views: &[ViewResult]) -> Self {
        let robots = robot_poses.iter().enumerate().map(|(index, p)| Frame {
            kind: FrameKind::Robot,
            index,
            pose: *p,
        });
        let cams = views.iter().enumerate().map(|(index, v)| Frame {
            kind: FrameKind::Camera,
            index,
            pose: v.pose,
        });
        Self {
            points,
            frames: robots.chain(cams).collect(),
        }
    }
}

const PLY_FRAME_FIELDS: [&str; 12] = [
    "r00", "r01", "r02", "tx", "r10", "r11", "r12", "ty", "r20", "r21", "r22", "tz",
];

/// Writes a binary little-endian PLY file: a `vertex` element with `float`
/// coordinates and a `frame` element (`uchar kind` 0 robot / 1 camera,
/// `uint index`, 12 `double` of the row-major `[R | t]`).
pub fn write_cloud(path: &Path, cloud: &Cloud) -> Result<()> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment frame R_0, meters\n");
    writeln!(header, "element vertex {}", cloud.points.len()).unwrap();
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    writeln!(header, "element frame {}", cloud.frames.len()).unwrap();
    header.push_str("property uchar kind\nproperty uint index\n");
    for f in PLY_FRAME_FIELDS {
        writeln!(header, "property double {f}").unwrap();
    }
    header.push_str("end_header\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(cloud.points.len() * 12 + cloud.frames.len() * 101);
    for p in &cloud.points {
        for c in p.iter() {
            bytes.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for f in &cloud.frames {
        bytes.push(match f.kind {
            FrameKind::Robot => 0,
            FrameKind::Camera => 1,
        });
        let index = u32::try_from(f.index).map_err(|_| Error::Parse("frame index exceeds u32".into()))?;
        bytes.extend_from_slice(&index.to_le_bytes());
        for v in f.pose.to_row_major_3x4() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a cloud written by [`write_cloud`].
pub fn read_cloud(path: &Path) -> Result<Cloud> {
    let bytes = fs::read(path)?;
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| corrupt(path, "no PLY header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt(path, "header is not text"))?;
    let mut expected = String::from("ply\nformat binary_little_endian 1.0\ncomment frame R_0, meters\n");
    let count = |name: &str| -> Result<usize> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("element {name} ")))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| corrupt(path, format!("no element {name}")))
    };
    let (np, nf) = (count("vertex")?, count("frame")?);
    writeln!(expected, "element vertex {np}").unwrap();
    expected.push_str("property float x\nproperty float y\nproperty float z\n");
    writeln!(expected, "element frame {nf}").unwrap();
    expected.push_str("property uchar kind\nproperty uint index\n");
    for f in PLY_FRAME_FIELDS {
        writeln!(expected, "property double {f}").unwrap();
    }
    expected.push_str("end_header\n");
    if header != expected {
        return Err(corrupt(path, "unsupported PLY layout"));
    }
    let body = &bytes[end..];
    let want = np * 12 + nf * 101;
    if body.len() != want {
        return Err(corrupt(path, format!("expected {want} data bytes, found {}", body.len())));
    }
    if np == 0 {
        return Err(Error::EmptyCloud);
    }
    let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
    let points = (0..np)
        .map(|i| Vector3::new(f32_at(i * 12), f32_at(i * 12 + 4), f32_at(i * 12 + 8)))
        .collect();
    let base = np * 12;
    let frames = (0..nf)
        .map(|i| -> Result<Frame> {
            let o = base + i * 101;
            let kind = match body[o] {
                0 => FrameKind::Robot,
                1 => FrameKind::Camera,
                k => return Err(corrupt(path, format!("unknown frame kind {k}"))),
            };
            let index = u32::from_le_bytes(body[o + 1..o + 5].try_into().unwrap()) as usize;
            let mut m = [0.0; 12];
            for (k, v) in m.iter_mut().enumerate() {
                let p = o + 5 + 8 * k;
                *v = f64::from_le_bytes(body[p..p + 8].try_into().unwrap());
            }
            Ok(Frame {
                kind,
                index,
                pose: RigidTransform::from_row_major_3x4(&m),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Cloud { points, frames })
}

/// Writes a calibration's metric cloud with its robot and camera frames.
pub fn export_cloud(result: &CalibrationResult, path: &Path) -> Result<()> {
    write_cloud(path, &Cloud::new(result.cloud.clone(), &result.robot_poses, &result.views))
}

/// Path of the cloud file written next to a result file.
pub fn cloud_path_for(result: &Path) -> PathBuf {
    result.with_extension("ply")
}
