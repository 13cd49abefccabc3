//! Synthetic scenarios with known ground truth.
//!
//! Scenes are piecewise planar (a ground or table plane, optional room
//! walls, boxes, a checkerboard lying on the ground) and are rendered by
//! casting one ray per pixel, so every stored depth is exact up to the
//! configured noise. The world frame `W` is the robot base; everything
//! handed out is expressed in `R_0`, the robot frame at pose 0.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BoardSpec;
use crate::geometry::{Intrinsics, Rotation, RigidTransform};
use crate::graph::{build_graph, CovisibilityMatrix, DEFAULT_K_FPS, DEFAULT_K_NN};
use crate::loss::{ParameterBlock, RobotTrajectory};
use crate::pointmap::{GroundMask, MatchPair, MatchSet, Pointmap};
use crate::scene::{SceneInputs, ViewData};

/// Surface id of the ground or table plane.
pub const GROUND_SURFACE: usize = 0;
const NO_SURFACE: usize = usize::MAX;
const MAX_RANGE: f64 = 50.0;
/// Grid stride (pixels) for co-visibility sampling.
const SCORE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full 6-DoF end-effector motion above a table.
    Arm,
    /// Ground vehicle in a room: planar translation and yaw only.
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub boxes: usize,
    /// Half-size of the table (arm) or room (mobile), meters.
    pub extent: f64,
    pub board: Option<BoardSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the multiplicative depth noise.
    pub depth_rel: f64,
    /// Fraction of matches whose second pixel is replaced at random.
    pub outlier_fraction: f64,
    /// Robot pose noise: meters for translation, radians for rotation.
    pub pose_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub cameras: usize,
    pub poses: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    /// True metric scale per camera; a single value applies to all cameras.
    pub lambda: Vec<f64>,
    pub matches_per_edge: usize,
    pub estimates_per_view: usize,
    /// Store the true intrinsics as the prior.
    pub intrinsics_prior: bool,
    pub ground_masks: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            boxes: 3,
            extent: 0.5,
            board: None,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            depth_rel: 0.0,
            outlier_fraction: 0.0,
            pose_jitter: 0.0,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Arm,
            cameras: 1,
            poses: 25,
            width: 64,
            height: 48,
            focal: 48.0,
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
            lambda: vec![1.0],
            matches_per_edge: 64,
            estimates_per_view: 1,
            intrinsics_prior: true,
            ground_masks: false,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.cameras == 0 {
            return bad("cameras must be at least 1");
        }
        if self.poses < 2 {
            return bad("poses must be at least 2");
        }
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8");
        }
        if !(self.focal > 0.0) {
            return bad("focal must be positive");
        }
        if !(self.scene.extent > 0.0) {
            return bad("scene extent must be positive");
        }
        let n = &self.noise;
        if !(n.depth_rel >= 0.0 && n.pose_jitter >= 0.0) {
            return bad("noise parameters must be non-negative");
        }
        if !(0.0..=1.0).contains(&n.outlier_fraction) {
            return bad("outlier fraction must be in [0, 1]");
        }
        if self.lambda.is_empty() || (self.lambda.len() != 1 && self.lambda.len() != self.cameras)
        {
            return bad("lambda needs one value or one per camera");
        }
        if self.lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lambda must be positive");
        }
        if self.matches_per_edge == 0 || self.estimates_per_view == 0 {
            return bad("matches_per_edge and estimates_per_view must be at least 1");
        }
        if let Some(b) = &self.scene.board {
            if b.rows < 2 || b.cols < 2 || !(b.square > 0.0) {
                return bad("board needs at least 2x2 corners and a positive square size");
            }
        }
        Ok(())
    }

    pub fn lambda_of(&self, camera: usize) -> f64 {
        if self.lambda.len() == 1 {
            self.lambda[0]
        } else {
            self.lambda[camera]
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Named scenario presets.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "franka-like" => Ok(ScenarioConfig {
            mode: Mode::Arm,
            cameras: 1,
            poses: 25,
            scene: SceneConfig {
                boxes: 3,
                extent: 0.5,
                board: Some(BoardSpec {
                    rows: 7,
                    cols: 10,
                    square: 0.03,
                }),
            },
            ..ScenarioConfig::default()
        }),
        "memroc-like" => Ok(ScenarioConfig {
            mode: Mode::Mobile,
            cameras: 3,
            poses: 25,
            focal: 40.0,
            scene: SceneConfig {
                boxes: 4,
                extent: 3.0,
                board: Some(BoardSpec {
                    rows: 7,
                    cols: 6,
                    square: 0.10,
                }),
            },
            ground_masks: true,
            ..ScenarioConfig::default()
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// What the generator knows and the solver has to recover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `X_j = T^R_{C_j}`.
    pub extrinsics: Vec<RigidTransform>,
    pub lambda: Vec<f64>,
    /// Metric camera poses `T^{R_0}_{C_v}` per view.
    pub view_poses: Vec<RigidTransform>,
    /// Exact robot poses (the archive trajectory may be jittered).
    pub trajectory: RobotTrajectory,
    pub intrinsics: Intrinsics,
    /// Ground plane in `R_0` as `(unit normal, offset)`, `n . p = d`.
    pub ground_plane: (Vector3<f64>, f64),
    /// Checkerboard inner corners in `R_0`, row-major.
    pub board_corners: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub inputs: SceneInputs,
    /// Robot poses handed to the solver.
    pub trajectory: RobotTrajectory,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
enum Surface {
    /// `z = 0` restricted to `|x|, |y| <= half`.
    Ground { half: f64 },
    /// Axis-aligned plane `p[axis] = value`, only hit from the `inward` side.
    Wall { axis: usize, value: f64 },
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

#[derive(Debug, Clone)]
struct World {
    surfaces: Vec<Surface>,
}

impl World {
    /// Nearest hit along `origin + t * dir`, as `(t, surface id)`.
    /// Box faces get ids `first_box_id + 6 * box + face`.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        let mut consider = |t: f64, id: usize| {
            if t > 1e-9 && t < MAX_RANGE && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, id));
            }
        };
        let mut id = 0;
        for s in &self.surfaces {
            match s {
                Surface::Ground { half } => {
                    if dir.z.abs() > 1e-12 {
                        let t = -origin.z / dir.z;
                        let p = origin + dir * t;
                        if p.x.abs() <= *half && p.y.abs() <= *half {
                            consider(t, id);
                        }
                    }
                    id += 1;
                }
                Surface::Wall { axis, value } => {
                    let d = dir[*axis];
                    if d.abs() > 1e-12 {
                        consider((value - origin[*axis]) / d, id);
                    }
                    id += 1;
                }
                Surface::Box { min, max } => {
                    if let Some((t, face)) = ray_box(origin, dir, min, max) {
                        consider(t, id + face);
                    }
                    id += 6;
                }
            }
        }
        best
    }
}

/// Entry point of a ray into an axis-aligned box, with the face index
/// `2 * axis + (0 for the min side, 1 for the max side)`.
fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((min[a] - origin[a]) / dir[a], (max[a] - origin[a]) / dir[a]);
        let (lo, hi, f) = if t1 < t2 { (t1, t2, 2 * a) } else { (t2, t1, 2 * a + 1) };
        if lo > t_near {
            t_near = lo;
            face = f;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, face))
}

/// Rendered view: exact depth and surface id per pixel.
struct Render {
    depth: Vec<f64>,
    surface: Vec<usize>,
}

struct Camera {
    /// `T^W_C`.
    pose: RigidTransform,
    k: Intrinsics,
}

impl Camera {
    fn ray_world(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.pose.rotation.rotate(&self.k.ray(pixel))
    }

    /// Depth and surface seen through `pixel`.
    fn cast(&self, world: &World, pixel: &Vector2<f64>) -> Option<(f64, usize)> {
        world.cast(&self.pose.translation, &self.ray_world(pixel))
    }

    fn render(&self, world: &World) -> Render {
        let (w, h) = (self.k.width, self.k.height);
        let mut depth = vec![0.0; w * h];
        let mut surface = vec![NO_SURFACE; w * h];
        for row in 0..h {
            for col in 0..w {
                if let Some((t, s)) = self.cast(world, &Vector2::new(col as f64, row as f64)) {
                    depth[row * w + col] = t;
                    surface[row * w + col] = s;
                }
            }
        }
        Render { depth, surface }
    }

    /// Pixel and depth of a world point, if in front of the camera.
    fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let q = self.pose.inverse().apply(p);
        if q.z <= 1e-6 {
            return None;
        }
        Some((
            Vector2::new(self.k.fx * q.x / q.z + self.k.cx, self.k.fy * q.y / q.z + self.k.cy),
            q.z,
        ))
    }

    /// Whether `p` is the first surface point on its ray and lies where all
    /// four neighbouring pixel centers see the same surface `s`.
    fn sees(&self, world: &World, render: &Render, p: &Vector3<f64>, s: usize) -> Option<Vector2<f64>> {
        let (pix, z) = self.project(p)?;
        if surface_block(render, &self.k, &pix)? != s {
            return None;
        }
        let (t, hit) = self.cast(world, &pix)?;
        (hit == s && (t - z).abs() <= 1e-9 * (1.0 + z)).then_some(pix)
    }
}

/// Common surface of the four pixel centers around `pix`, if there is one
/// and all are inside the image.
fn surface_block(render: &Render, k: &Intrinsics, pix: &Vector2<f64>) -> Option<usize> {
    let (w, h) = (k.width, k.height);
    if !(pix.x >= 0.0 && pix.y >= 0.0 && pix.x < (w - 1) as f64 && pix.y < (h - 1) as f64) {
        return None;
    }
    let (c, r) = (pix.x.floor() as usize, pix.y.floor() as usize);
    let s = render.surface[r * w + c];
    let same = [(c + 1, r), (c, r + 1), (c + 1, r + 1)]
        .iter()
        .all(|&(cc, rr)| render.surface[rr * w + cc] == s);
    (s != NO_SURFACE && same).then_some(s)
}

fn view_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed ^ stream.wrapping_mul(0xA24B_AED4_963E_E407) ^ (index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Camera at `center` looking at `target`, rolled by `roll` about its axis.
fn look_at(center: Vector3<f64>, target: Vector3<f64>, roll: f64) -> RigidTransform {
    let z = (target - center).normalize();
    let up = Vector3::z();
    let x = {
        let c = z.cross(&up);
        if c.norm() < 1e-6 {
            Vector3::x()
        } else {
            c.normalize()
        }
    };
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(Rotation::from_matrix_exact(&r) * Rotation::rz(roll), center)
}

/// Camera-to-robot rotation looking forward along robot `x`, yawed by `yaw`
/// and tilted down by `pitch`.
fn forward_camera(yaw: f64, pitch: f64) -> Rotation {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Rotation::rz(yaw) * Rotation::from_matrix_exact(&base) * Rotation::rx(-pitch)
}

struct Layout {
    world: World,
    /// Base-frame end-effector / vehicle poses `T^W_{R_i}`.
    robot: Vec<RigidTransform>,
    extrinsics: Vec<RigidTransform>,
    /// Board inner corners in the base frame.
    corners: Vec<Vector3<f64>>,
}

fn board_corners(board: &Option<BoardSpec>, center: Vector2<f64>) -> Vec<Vector3<f64>> {
    let Some(b) = board else { return Vec::new() };
    let w = (b.cols - 1) as f64 * b.square;
    let h = (b.rows - 1) as f64 * b.square;
    let mut out = Vec::with_capacity(b.rows * b.cols);
    for r in 0..b.rows {
        for c in 0..b.cols {
            out.push(Vector3::new(
                center.x - w / 2.0 + c as f64 * b.square,
                center.y - h / 2.0 + r as f64 * b.square,
                0.0,
            ));
        }
    }
    out
}

fn arm_layout(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Layout {
    let half = cfg.scene.extent;
    let mut surfaces = vec![Surface::Ground { half }];
    let board_half = cfg
        .scene
        .board
        .as_ref()
        .map(|b| (b.cols as f64 * b.square / 2.0, b.rows as f64 * b.square / 2.0))
        .unwrap_or((0.05, 0.05));
    for i in 0..cfg.scene.boxes {
        // boxes sit on a ring around the board so they never cover it
        let ang = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.5)) / cfg.scene.boxes as f64;
        let radius = board_half.0.max(board_half.1) + rng.random_range(0.08..0.15) * half / 0.5;
        let c = Vector2::new(radius * ang.cos(), radius * ang.sin());
        let size = Vector3::new(
            rng.random_range(0.03..0.06),
            rng.random_range(0.03..0.06),
            rng.random_range(0.04..0.12),
        );
        surfaces.push(Surface::Box {
            min: Vector3::new(c.x - size.x, c.y - size.y, 0.0),
            max: Vector3::new(c.x + size.x, c.y + size.y, size.z),
        });
    }
    let x0 = RigidTransform::new(
        Rotation::from_rotation_vector(&Vector3::new(0.3, -0.2, 0.1)),
        Vector3::new(0.04, -0.06, 0.08),
    );
    let extrinsics: Vec<RigidTransform> = (0..cfg.cameras)
        .map(|j| {
            if j == 0 {
                return x0;
            }
            let a = std::f64::consts::TAU * j as f64 / cfg.cameras as f64;
            let offset = RigidTransform::new(
                Rotation::from_rotation_vector(&Vector3::new(0.08 * a.cos(), 0.08 * a.sin(), 0.05)),
                Vector3::new(0.06 * a.cos(), 0.06 * a.sin(), 0.01),
            );
            x0 * offset
        })
        .collect();
    let robot = (0..cfg.poses)
        .map(|i| {
            let az = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.6)) / cfg.poses as f64;
            let el = rng.random_range(0.9..1.35f64);
            let dist = rng.random_range(0.45..0.65);
            let center = Vector3::new(dist * el.cos() * az.cos(), dist * el.cos() * az.sin(), dist * el.sin());
            let target = Vector3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), 0.0);
            let cam = look_at(center, target, rng.random_range(-0.5..0.5));
            cam * extrinsics[0].inverse()
        })
        .collect();
    Layout {
        world: World { surfaces },
        robot,
        extrinsics,
        corners: board_corners(&cfg.scene.board, Vector2::zeros()),
    }
}

fn mobile_layout(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Layout {
    let half = cfg.scene.extent;
    let mut surfaces = vec![
        Surface::Ground { half },
        Surface::Wall { axis: 0, value: half },
        Surface::Wall { axis: 0, value: -half },
        Surface::Wall { axis: 1, value: half },
        Surface::Wall { axis: 1, value: -half },
    ];
    let radius = (0.35 * half).min(1.2);
    for i in 0..cfg.scene.boxes {
        let ang = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.5)) / cfg.scene.boxes as f64;
        let r = rng.random_range(0.6..0.8) * half;
        let c = Vector2::new(r * ang.cos(), r * ang.sin());
        let size = Vector3::new(
            rng.random_range(0.15..0.3),
            rng.random_range(0.15..0.3),
            rng.random_range(0.3..0.8),
        );
        surfaces.push(Surface::Box {
            min: Vector3::new(c.x - size.x, c.y - size.y, 0.0),
            max: Vector3::new(c.x + size.x, c.y + size.y, size.z),
        });
    }
    let yaws = [0.0, 60f64.to_radians(), -60f64.to_radians()];
    let heights = [0.5, 0.45, 0.55];
    let extrinsics = (0..cfg.cameras)
        .map(|j| {
            let yaw = yaws[j % 3] + 0.3 * (j / 3) as f64;
            RigidTransform::new(
                forward_camera(yaw, 20f64.to_radians() + 0.02 * j as f64),
                Vector3::new(0.2 * yaw.cos(), 0.2 * yaw.sin(), heights[j % 3]),
            )
        })
        .collect();
    let span = std::f64::consts::TAU * 0.9;
    let robot = (0..cfg.poses)
        .map(|i| {
            let phi = span * i as f64 / (cfg.poses - 1).max(1) as f64 + rng.random_range(-0.05..0.05);
            let r = radius * rng.random_range(0.9..1.1);
            // turned inward so the +60 degree camera faces the board at the center
            let yaw = phi + std::f64::consts::FRAC_PI_2 + 0.5 + rng.random_range(-0.2..0.2);
            RigidTransform::new(Rotation::rz(yaw), Vector3::new(r * phi.cos(), r * phi.sin(), 0.0))
        })
        .collect();
    Layout {
        world: World { surfaces },
        robot,
        extrinsics,
        corners: board_corners(&cfg.scene.board, Vector2::zeros()),
    }
}

fn jitter(pose: &RigidTransform, mode: Mode, sigma: f64, rng: &mut ChaCha8Rng) -> RigidTransform {
    if sigma == 0.0 {
        return *pose;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    match mode {
        Mode::Arm => {
            let w = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            let t = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            RigidTransform::new(Rotation::from_rotation_vector(&w) * pose.rotation, pose.translation + t)
        }
        Mode::Mobile => {
            let t = Vector3::new(n.sample(rng), n.sample(rng), 0.0);
            RigidTransform::new(Rotation::rz(n.sample(rng)) * pose.rotation, pose.translation + t)
        }
    }
}

/// Renders a full scenario. Deterministic for a given configuration.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = match cfg.mode {
        Mode::Arm => arm_layout(cfg, &mut rng),
        Mode::Mobile => mobile_layout(cfg, &mut rng),
    };
    let k = cfg.intrinsics();
    let world = &layout.world;
    let base_to_r0 = layout.robot[0].inverse();

    // views ordered by pose index, then camera
    let mut cameras = Vec::new();
    let mut view_meta = Vec::new();
    for i in 0..cfg.poses {
        for j in 0..cfg.cameras {
            cameras.push(Camera {
                pose: layout.robot[i] * layout.extrinsics[j],
                k,
            });
            view_meta.push((j, i));
        }
    }
    let renders: Vec<Render> = cameras.par_iter().map(|c| c.render(world)).collect();

    let views: Vec<ViewData> = (0..cameras.len())
        .into_par_iter()
        .map(|v| {
            let (camera, pose_index) = view_meta[v];
            let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, 1, v as u64));
            let render = &renders[v];
            let lambda = cfg.lambda_of(camera);
            let noise = Normal::new(0.0, cfg.noise.depth_rel).expect("finite noise");
            let estimates = (0..cfg.estimates_per_view)
                .map(|e| {
                    let mut points = vec![Vector3::zeros(); k.width * k.height];
                    let mut confidence = vec![0.0; k.width * k.height];
                    for row in 0..k.height {
                        for col in 0..k.width {
                            let i = row * k.width + col;
                            if render.surface[i] == NO_SURFACE {
                                continue;
                            }
                            let ray = k.ray(&Vector2::new(col as f64, row as f64));
                            let f = if cfg.noise.depth_rel > 0.0 {
                                (1.0 + noise.sample(&mut rng)).max(0.5)
                            } else {
                                1.0
                            };
                            points[i] = ray * (render.depth[i] * f / lambda);
                            confidence[i] = if cfg.estimates_per_view == 1 {
                                1.0
                            } else {
                                1.0 + 0.5 * ((e + i) % 3) as f64
                            };
                        }
                    }
                    Pointmap::new(k.width, k.height, points, confidence)
                })
                .collect::<Result<Vec<_>>>()?;
            let ground_mask = cfg.ground_masks.then(|| GroundMask {
                width: k.width,
                height: k.height,
                floor: render.surface.iter().map(|&s| s == GROUND_SURFACE).collect(),
            });
            let corners = if layout.corners.is_empty() {
                None
            } else {
                layout
                    .corners
                    .iter()
                    .map(|p| cameras[v].sees(world, render, p, GROUND_SURFACE))
                    .collect::<Option<Vec<_>>>()
            };
            Ok(ViewData {
                id: v,
                camera,
                pose_index,
                width: k.width,
                height: k.height,
                estimates,
                intrinsics_prior: cfg.intrinsics_prior.then_some(k),
                ground_mask,
                corners,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = cameras.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let pair_scores: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let fab = shared_fraction(world, &cameras[a], &renders[a], &cameras[b], &renders[b]);
            let fba = shared_fraction(world, &cameras[b], &renders[b], &cameras[a], &renders[a]);
            (fab + fba) / 2.0
        })
        .collect();
    let mut table = vec![0.0; n * n];
    for (&(a, b), &s) in pairs.iter().zip(&pair_scores) {
        table[a * n + b] = s;
        table[b * n + a] = s;
    }
    let scores = CovisibilityMatrix::new(n, table)?;

    let edges = build_graph(&scores, DEFAULT_K_FPS, DEFAULT_K_NN)?;
    let matches: Vec<MatchSet> = edges
        .par_iter()
        .map(|&(a, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, 2, (a * n + b) as u64));
            edge_matches(cfg, world, (a, &cameras[a], &renders[a]), (b, &cameras[b], &renders[b]), &mut rng)
        })
        .collect();

    let truth_traj = RobotTrajectory::from_absolute(&layout.robot)?;
    let mut jrng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, 3, 0));
    let mut noisy: Vec<RigidTransform> = truth_traj
        .poses()
        .iter()
        .map(|p| jitter(p, cfg.mode, cfg.noise.pose_jitter, &mut jrng))
        .collect();
    noisy[0] = RigidTransform::identity();

    let truth = GroundTruth {
        extrinsics: layout.extrinsics.clone(),
        lambda: (0..cfg.cameras).map(|j| cfg.lambda_of(j)).collect(),
        view_poses: cameras.iter().map(|c| base_to_r0 * c.pose).collect(),
        trajectory: truth_traj,
        intrinsics: k,
        ground_plane: {
            let n = base_to_r0.rotation.rotate(&Vector3::z());
            (n, n.dot(&base_to_r0.translation))
        },
        board_corners: layout.corners.iter().map(|p| base_to_r0.apply(p)).collect(),
    };
    Ok(Scenario {
        inputs: SceneInputs {
            views,
            matches,
            scores,
            board: cfg.scene.board.clone(),
        },
        trajectory: RobotTrajectory::new(noisy)?,
        truth,
    })
}

impl Scenario {
    /// Ground truth in the solver's gauge: the world frame is the camera
    /// frame of view 0 in the reconstruction units of its camera.
    pub fn true_parameters(&self) -> ParameterBlock {
        let t = &self.truth;
        let anchor_cam = self.inputs.views[0].camera;
        let la = t.lambda[anchor_cam];
        let c0_inv = t.view_poses[0].inverse();
        let views = &self.inputs.views;
        ParameterBlock {
            poses: t
                .view_poses
                .iter()
                .map(|p| {
                    let rel = c0_inv * *p;
                    RigidTransform::new(rel.rotation, rel.translation / la)
                })
                .collect(),
            log_sigma: views.iter().map(|v| (t.lambda[v.camera] / la).ln()).collect(),
            intrinsics: vec![t.intrinsics; t.extrinsics.len()],
            log_lambda: vec![la.ln(); t.extrinsics.len()],
            extrinsics: t.extrinsics.clone(),
        }
    }
}

/// Fraction of `a`'s sampled pixels whose surface point `b` also sees.
fn shared_fraction(world: &World, ca: &Camera, ra: &Render, cb: &Camera, rb: &Render) -> f64 {
    let (w, h) = (ca.k.width, ca.k.height);
    let mut total = 0usize;
    let mut seen = 0usize;
    for row in (SCORE_STRIDE / 2..h).step_by(SCORE_STRIDE) {
        for col in (SCORE_STRIDE / 2..w).step_by(SCORE_STRIDE) {
            let i = row * w + col;
            if ra.surface[i] == NO_SURFACE {
                continue;
            }
            total += 1;
            let pix = Vector2::new(col as f64, row as f64);
            let p = ca.pose.translation + ca.ray_world(&pix) * ra.depth[i];
            if cb.sees(world, rb, &p, ra.surface[i]).is_some() {
                seen += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

fn edge_matches(
    cfg: &ScenarioConfig,
    world: &World,
    (a, ca, ra): (usize, &Camera, &Render),
    (b, cb, rb): (usize, &Camera, &Render),
    rng: &mut ChaCha8Rng,
) -> MatchSet {
    let (w, h) = (ca.k.width as f64, ca.k.height as f64);
    let mut pairs = Vec::with_capacity(cfg.matches_per_edge);
    let attempts = cfg.matches_per_edge * 200;
    for _ in 0..attempts {
        if pairs.len() == cfg.matches_per_edge {
            break;
        }
        let pa = Vector2::new(rng.random_range(0.0..w - 1.0), rng.random_range(0.0..h - 1.0));
        let Some(s) = surface_block(ra, &ca.k, &pa) else { continue };
        let Some((t, hit)) = ca.cast(world, &pa) else { continue };
        if hit != s {
            continue;
        }
        let p = ca.pose.translation + ca.ray_world(&pa) * t;
        if let Some(pb) = cb.sees(world, rb, &p, s) {
            pairs.push(MatchPair {
                pixel_a: pa,
                pixel_b: pb,
                weight: 1.0,
            });
        }
    }
    let outliers = (cfg.noise.outlier_fraction * pairs.len() as f64).round() as usize;
    let mut replaced = 0;
    let mut guard = 0;
    while replaced < outliers && guard < outliers * 200 + 200 {
        guard += 1;
        let pb = Vector2::new(rng.random_range(0.0..w - 1.0), rng.random_range(0.0..h - 1.0));
        if surface_block_valid(rb, &cb.k, &pb) {
            pairs[replaced].pixel_b = pb;
            replaced += 1;
        }
    }
    MatchSet {
        view_a: a,
        view_b: b,
        pairs,
    }
}

/// All four pixel centers around `pix` carry a depth.
fn surface_block_valid(render: &Render, k: &Intrinsics, pix: &Vector2<f64>) -> bool {
    let w = k.width;
    if !(pix.x >= 0.0 && pix.y >= 0.0 && pix.x < (w - 1) as f64 && pix.y < (k.height - 1) as f64) {
        return false;
    }
    let (c, r) = (pix.x.floor() as usize, pix.y.floor() as usize);
    [(c, r), (c + 1, r), (c, r + 1), (c + 1, r + 1)]
        .iter()
        .all(|&(cc, rr)| render.surface[rr * w + cc] != NO_SURFACE)
}
