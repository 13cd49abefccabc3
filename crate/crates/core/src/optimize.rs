//! Initialization, first-order minimization and assembly of the result.
//!
//! Each connected component of the match graph has its own gauge: the
//! lowest view id in it is the anchor, its pose fixed to identity and its
//! depth scale to 1. The component's world frame is therefore the anchor
//! camera frame in reconstruction units, and it is mapped to `R_0` through
//! the anchor's robot pose, extrinsics and metric scale.

use std::collections::VecDeque;

use log::{debug, info, warn};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Rotation, RigidTransform};
use crate::graph::{build_graph, DisjointSets, SceneGraph, DEFAULT_K_FPS, DEFAULT_K_NN};
use crate::ground::{self, PlaneModel, RansacConfig};
use crate::handeye::{
    analyze_observability, solve_planar_with_scale, solve_rotation_translation, solve_with_scale,
    MotionPair,
};
use crate::loss::{Gradient, Huber, LossOptions, LossWeights, ParameterBlock, PreparedMatch, Problem, RobotTrajectory};
use crate::pointmap::ViewRecord;
use crate::scene::SceneInputs;

/// Relative spread of motion scales within one component that triggers a
/// scale-disagreement warning.
pub const SCALE_DISAGREEMENT: f64 = 0.02;

/// Default `outlier_gate`.
pub const DEFAULT_OUTLIER_GATE: f64 = 4.0;

/// Relative residual below which a match is never gated.
const GATE_FLOOR: f64 = 1e-6;

/// Random triples tried by the robust similarity fit.
const LMEDS_TRIALS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepMultipliers {
    pub poses: f64,
    pub scales: f64,
    /// Applied relative to each intrinsic parameter's magnitude.
    pub intrinsics: f64,
    pub extrinsics: f64,
}

impl Default for StepMultipliers {
    fn default() -> Self {
        Self {
            poses: 1.0,
            scales: 1.0,
            intrinsics: 0.1,
            extrinsics: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Base step size.
    pub step: f64,
    pub multipliers: StepMultipliers,
    /// Final step size as a fraction of the base step (cosine decay).
    pub final_step: f64,
    /// Stop when the best loss improves by less than this, relatively,
    /// over `window` iterations.
    pub tolerance: f64,
    pub window: usize,
    /// Fraction of iterations during which the reprojection term is off.
    pub warmup: f64,
    /// Fraction of iterations over which it then ramps up to full weight.
    pub ramp: f64,
    /// Hold the per-view depth scales during the warmup.
    pub warmup_fixed_scales: bool,
    pub refine_intrinsics: bool,
    /// Keep `fx == fy` for every camera.
    pub shared_focal: bool,
    pub weights: LossWeights,
    pub huber: Option<Huber>,
    pub cross_loss: bool,
    pub w_rot: f64,
    pub w_trans: f64,
    pub k_fps: usize,
    pub k_nn: usize,
    pub ransac_iterations: usize,
    /// Meters.
    pub ransac_threshold: f64,
    /// Matches whose relative 3D residual under their edge's robust
    /// registration exceeds this multiple of the edge median get zero
    /// weight before descent. `None` keeps every match.
    pub outlier_gate: Option<f64>,
    /// Seed of the ground-plane consensus.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            step: 1e-2,
            multipliers: StepMultipliers::default(),
            final_step: 1e-3,
            tolerance: 1e-7,
            window: 20,
            warmup: 0.0,
            ramp: 0.2,
            warmup_fixed_scales: true,
            refine_intrinsics: true,
            shared_focal: false,
            weights: LossWeights::default(),
            huber: None,
            cross_loss: true,
            w_rot: 1.0,
            w_trans: 1.0,
            k_fps: DEFAULT_K_FPS,
            k_nn: DEFAULT_K_NN,
            ransac_iterations: ground::DEFAULT_ITERATIONS,
            ransac_threshold: ground::DEFAULT_THRESHOLD,
            outlier_gate: Some(DEFAULT_OUTLIER_GATE),
            seed: ground::DEFAULT_SEED,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.tolerance > 0.0) || !(self.step > 0.0) || !(self.final_step > 0.0) {
            return bad("step sizes and tolerance must be positive");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup) || !(0.0..=1.0).contains(&self.ramp) {
            return bad("warmup and ramp are fractions in [0, 1]");
        }
        let m = &self.multipliers;
        if [m.poses, m.scales, m.intrinsics, m.extrinsics].iter().any(|x| !(*x >= 0.0)) {
            return bad("step multipliers must be non-negative");
        }
        let w = &self.weights;
        if [w.w3d, w.w2d, w.wcal, w.wcross].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return bad("loss weights must be non-negative");
        }
        if !(self.w_rot >= 0.0 && self.w_trans >= 0.0) {
            return bad("residual block weights must be non-negative");
        }
        if let Some(h) = &self.huber {
            if !(h.delta_3d > 0.0 && h.delta_2d > 0.0) {
                return bad("huber thresholds must be positive");
            }
        }
        if self.k_fps == 0 || self.k_nn == 0 {
            return bad("k_fps and k_nn must be at least 1");
        }
        if !(self.ransac_threshold > 0.0) || self.ransac_iterations == 0 {
            return bad("ransac settings must be positive");
        }
        if let Some(g) = self.outlier_gate {
            if !(g > 0.0 && g.is_finite()) {
                return bad("outlier_gate must be positive");
            }
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            w_rot: self.w_rot,
            w_trans: self.w_trans,
            robust: self.huber,
            cross_enabled: self.cross_loss,
        }
    }
}

/// Per-camera notes from initialization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CameraFlags {
    /// Robot rotations share one axis: the extrinsic translation along it
    /// is not constrained by the motions.
    pub z_unobservable: bool,
    /// Height recovered from the ground plane: mean and spread, meters.
    pub z_recovered: Option<(f64, f64)>,
    /// Closed-form solver failed; extrinsics started at identity.
    pub extrinsics_fallback: bool,
    /// Metric scale could not be initialized from motion; started at 1.
    pub lambda_fallback: bool,
    /// Intrinsics were estimated from the pointmaps (no prior).
    pub intrinsics_estimated: bool,
    /// Motion scales of cameras in one component differ by more than 2%.
    pub scale_disagreement: bool,
}

/// Starting point plus the gauge and observability bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub params: ParameterBlock,
    /// Anchor view of each view's component.
    pub anchors: Vec<usize>,
    /// Per camera, the robot-frame axis along which the extrinsic
    /// translation is unobservable.
    pub frozen_axes: Vec<Option<Vector3<f64>>>,
    pub flags: Vec<CameraFlags>,
    pub warnings: Vec<String>,
    /// Per problem edge and match, whether the match agrees with the
    /// edge's robust registration.
    pub inliers: Vec<Vec<bool>>,
}

/// Fused views, the match graph and the loss problem built on them.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<ViewRecord>,
    pub graph: SceneGraph,
    pub problem: Problem,
    /// Graph edges that carried no correspondences.
    pub dropped_edges: Vec<(usize, usize)>,
}

pub fn prepare(inputs: &SceneInputs, traj: &RobotTrajectory, cfg: &OptimizerConfig) -> Result<Prepared> {
    inputs.validate()?;
    let records = inputs.view_records()?;
    let edges = build_graph(&inputs.scores, cfg.k_fps, cfg.k_nn)?;
    let (graph, dropped_edges) = SceneGraph::from_edges(records.len(), &edges, &inputs.matches)?;
    if !dropped_edges.is_empty() {
        warn!("{} graph edges have no correspondences and were dropped", dropped_edges.len());
    }
    let problem = Problem::new(&records, &graph, traj)?;
    Ok(Prepared {
        records,
        graph,
        problem,
        dropped_edges,
    })
}

/// Similarity `dst ~ s R src + t`.
#[derive(Debug, Clone, Copy)]
struct Similarity {
    s: f64,
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Similarity {
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p * self.s + self.t
    }

    fn inverse(&self) -> Similarity {
        let rt = self.r.transpose();
        Similarity {
            s: 1.0 / self.s,
            r: rt,
            t: -(rt * self.t) / self.s,
        }
    }
}

fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Similarity> {
    let n = src.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / nf;
    let md = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - ms, b - md);
        cov += db * da.transpose();
        var += da.norm_squared();
    }
    cov /= nf;
    var /= nf;
    if !(var > 1e-18) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let s = trace / var;
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    Some(Similarity { s, r, t: md - r * ms * s })
}

/// Umeyama fit with median-based trimming.
/// Least-median-of-squares hypothesis over random triples, then trimmed
/// refits around the best one. Also returns a conditioning score: the
/// smallest spread of the kept points over their median residual, times
/// the square root of their count.
fn robust_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(Similarity, f64)> {
    let n = src.len();
    let residuals = |f: &Similarity| -> Vec<f64> { src.iter().zip(dst).map(|(a, b)| (f.apply(a) - b).norm()).collect() };
    let median = |r: &[f64]| {
        let mut s = r.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let mut fit = umeyama(src, dst)?;
    let mut best = median(&residuals(&fit));
    if n > 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        for _ in 0..LMEDS_TRIALS {
            let idx = rand::seq::index::sample(&mut rng, n, 3);
            let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
            let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
            let Some(h) = umeyama(&s, &d) else { continue };
            if !(h.s.is_finite() && h.s > 0.0) {
                continue;
            }
            let m = median(&residuals(&h));
            if m < best {
                best = m;
                fit = h;
            }
        }
    }
    let scale = dst.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1e-12);
    let mut keep: Vec<usize> = (0..n).collect();
    for _ in 0..4 {
        let res = residuals(&fit);
        let thr = 2.5 * median(&res) + 1e-9 * scale;
        let next_keep: Vec<usize> = (0..n).filter(|&i| res[i] <= thr).collect();
        if next_keep.len() < 3 {
            break;
        }
        keep = next_keep;
        let s: Vec<_> = keep.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = keep.iter().map(|&i| dst[i]).collect();
        fit = umeyama(&s, &d)?;
        if keep.len() == n {
            break;
        }
    }
    let kept: Vec<_> = keep.iter().map(|&i| dst[i]).collect();
    let mean = kept.iter().sum::<Vector3<f64>>() / kept.len() as f64;
    let cov = kept.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / kept.len() as f64;
    let spread = cov.symmetric_eigenvalues().min().max(0.0).sqrt();
    let res: Vec<f64> = keep.iter().map(|&i| (fit.apply(&src[i]) - dst[i]).norm()).collect();
    let quality = spread * (kept.len() as f64).sqrt() / (median(&res) + 1e-9 * scale);
    Some((fit, quality))
}

/// Linear estimate of `(fx, fy, cx, cy)` from `u = fx x/z + cx`.
fn estimate_intrinsics(views: &[&ViewRecord]) -> Result<Intrinsics> {
    let first = views.first().ok_or(Error::EmptyInput)?;
    let (mut su, mut sv) = ([0.0; 5], [0.0; 5]);
    for v in views {
        let pm = &v.canonical;
        for (i, p) in pm.valid_points() {
            if !(p.z > 0.0) {
                continue;
            }
            let (u, vv) = ((i % pm.width) as f64, (i / pm.width) as f64);
            for (acc, a, obs) in [(&mut su, p.x / p.z, u), (&mut sv, p.y / p.z, vv)] {
                acc[0] += a * a;
                acc[1] += a;
                acc[2] += 1.0;
                acc[3] += a * obs;
                acc[4] += obs;
            }
        }
    }
    let solve = |s: [f64; 5]| {
        let det = s[0] * s[2] - s[1] * s[1];
        if !(det.abs() > 1e-12 * (s[0] * s[2]).max(1e-300)) {
            return None;
        }
        Some(((s[3] * s[2] - s[1] * s[4]) / det, (s[0] * s[4] - s[1] * s[3]) / det))
    };
    let ((fx, cx), (fy, cy)) = solve(su).zip(solve(sv)).ok_or_else(|| {
        Error::InvalidIntrinsics("pointmaps do not constrain the intrinsics".into())
    })?;
    Intrinsics::new(fx, fy, cx, cy, first.width(), first.height())
}

/// Starting values for every parameter.
///
/// Poses and depth scales come from trimmed similarity registration of
/// matched points, chained over a maximum-match spanning tree of each
/// component. Extrinsics and metric scales come from the closed-form
/// hand-eye solvers on the chained camera motions.
pub fn initialize(prep: &Prepared, cfg: &OptimizerConfig) -> Result<Initialization> {
    let problem = &prep.problem;
    let views = &prep.records;
    let nv = views.len();
    let nc = problem.camera_count;
    let mut warnings = Vec::new();
    for j in 0..nc {
        let found = problem.views.iter().filter(|v| v.camera == j).count();
        if found < 2 {
            return Err(Error::InsufficientPoses { camera: j, found });
        }
    }

    let mut flags = vec![CameraFlags::default(); nc];
    let mut intrinsics = Vec::with_capacity(nc);
    for (j, flag) in flags.iter_mut().enumerate() {
        let own: Vec<&ViewRecord> = views.iter().filter(|v| v.camera == j).collect();
        match own.iter().find_map(|v| v.intrinsics_prior) {
            Some(k) => intrinsics.push(k),
            None => {
                let mut k = estimate_intrinsics(&own)?;
                if cfg.shared_focal {
                    let f = (k.fx + k.fy) / 2.0;
                    k = k.with_params([f, f, k.cx, k.cy]);
                }
                flag.intrinsics_estimated = true;
                intrinsics.push(k);
            }
        }
    }

    // pairwise similarities
    let registered: Vec<(Option<(Similarity, f64)>, Vec<bool>)> = problem
        .edges
        .par_iter()
        .map(|e| {
            let ka = &intrinsics[views[e.a].camera];
            let kb = &intrinsics[views[e.b].camera];
            let points = |m: &PreparedMatch| (kb.ray(&m.pixel_b) * m.depth_b, ka.ray(&m.pixel_a) * m.depth_a);
            let (src, dst): (Vec<_>, Vec<_>) = e.matches.iter().filter(|m| m.weight > 0.0).map(points).unzip();
            let fit = robust_similarity(&src, &dst);
            let mut inliers = vec![true; e.matches.len()];
            if let (Some((sim, _)), Some(gate)) = (fit, cfg.outlier_gate) {
                let rel: Vec<f64> = e
                    .matches
                    .iter()
                    .map(|m| {
                        let (b, a) = points(m);
                        (sim.apply(&b) - a).norm() / a.norm().max(1e-12)
                    })
                    .collect();
                let mut live: Vec<f64> = rel.iter().zip(&e.matches).filter(|(_, m)| m.weight > 0.0).map(|(r, _)| *r).collect();
                live.sort_by(f64::total_cmp);
                let thr = (gate * live[live.len() / 2]).max(GATE_FLOOR);
                for (flag, r) in inliers.iter_mut().zip(&rel) {
                    *flag = *r <= thr;
                }
            }
            (fit, inliers)
        })
        .collect();
    let (fits, inliers): (Vec<_>, Vec<_>) = registered.into_iter().unzip();
    let sims: Vec<Option<Similarity>> = fits.iter().map(|f| f.map(|f| f.0)).collect();

    let components = prep.graph.components();
    let mut order: Vec<usize> = (0..problem.edges.len()).filter(|&i| sims[i].is_some()).collect();
    order.sort_by(|&x, &y| fits[y].unwrap().1.total_cmp(&fits[x].unwrap().1));
    let mut sets = DisjointSets::new(nv);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for i in order {
        let e = &problem.edges[i];
        if sets.union(e.a, e.b) {
            adj[e.a].push(i);
            adj[e.b].push(i);
        }
    }
    let mut poses = vec![RigidTransform::identity(); nv];
    let mut log_sigma = vec![0.0f64; nv];
    let mut reached = vec![false; nv];
    for v in 0..nv {
        if components[v] != v {
            continue;
        }
        reached[v] = true;
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            for &i in &adj[u] {
                let e = &problem.edges[i];
                let sim = sims[i].expect("tree edges have a fit");
                // sim maps b's camera frame into a's
                let (w, rel) = if e.a == u { (e.b, sim) } else { (e.a, sim.inverse()) };
                if reached[w] {
                    continue;
                }
                let su = log_sigma[u].exp();
                let step = RigidTransform::new(Rotation::from_matrix_projected(&rel.r), rel.t * su);
                poses[w] = poses[u] * step;
                log_sigma[w] = log_sigma[u] + rel.s.ln();
                reached[w] = true;
                queue.push_back(w);
            }
        }
    }
    let unreached = reached.iter().filter(|r| !**r).count();
    if unreached > 0 {
        let msg = format!("{unreached} views could not be registered and start at identity");
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut log_lambda = vec![0.0; nc];
    let mut extrinsics = vec![RigidTransform::identity(); nc];
    let mut frozen_axes = vec![None; nc];
    for j in 0..nc {
        let all_robot: Vec<RigidTransform> = problem.motions[j].iter().map(|m| m.robot).collect();
        let pairs: Vec<MotionPair> = problem.motions[j]
            .iter()
            .filter(|m| components[m.from] == components[m.to] && reached[m.from] && reached[m.to])
            .map(|m| MotionPair {
                robot: m.robot,
                camera: poses[m.from].inverse() * poses[m.to],
            })
            .collect();
        let robot_moves = all_robot.iter().any(|a| a.translation.norm() > 1e-9);
        let obs = analyze_observability(&all_robot);
        let solved = if let Some(axis) = obs.unobservable_axis {
            flags[j].z_unobservable = true;
            frozen_axes[j] = Some(axis);
            solve_planar_with_scale(&pairs).map(|s| (s.x, s.lambda))
        } else {
            solve_with_scale(&pairs)
        };
        let (x, lambda) = match solved {
            Ok(v) => v,
            Err(Error::ZeroCameraTranslation) => {
                flags[j].lambda_fallback = true;
                let x = solve_rotation_translation(&pairs).unwrap_or_else(|_| {
                    flags[j].extrinsics_fallback = true;
                    RigidTransform::identity()
                });
                (x, 1.0)
            }
            Err(e) => {
                let msg = format!("camera {j}: closed-form extrinsics failed ({e}); starting from identity");
                warn!("{msg}");
                warnings.push(msg);
                flags[j].extrinsics_fallback = true;
                let mut ratios: Vec<f64> = pairs
                    .iter()
                    .filter(|p| p.camera.translation.norm() > 1e-9 && p.robot.translation.norm() > 1e-9)
                    .map(|p| p.robot.translation.norm() / p.camera.translation.norm())
                    .collect();
                ratios.sort_by(f64::total_cmp);
                let lambda = if ratios.is_empty() {
                    flags[j].lambda_fallback = true;
                    1.0
                } else {
                    ratios[ratios.len() / 2]
                };
                (RigidTransform::identity(), lambda)
            }
        };
        let lambda = if !robot_moves || !(lambda > 1e-9 && lambda.is_finite()) {
            flags[j].lambda_fallback = true;
            1.0
        } else {
            lambda
        };
        if flags[j].lambda_fallback {
            let msg = format!("camera {j}: metric scale is not observable from the motions; starting at 1");
            warn!("{msg}");
            warnings.push(msg);
        }
        debug!("camera {j}: initial lambda {lambda:.6}, extrinsics t = {:?}", x.translation);
        extrinsics[j] = x;
        log_lambda[j] = lambda.ln();
    }

    Ok(Initialization {
        params: ParameterBlock {
            poses,
            log_sigma,
            intrinsics,
            log_lambda,
            extrinsics,
        },
        anchors: components,
        frozen_axes,
        flags,
        inliers,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Best loss stopped improving.
    Converged,
    /// Every free gradient coordinate is zero.
    Stationary,
    MaxIterations,
    /// The loss became non-finite at this iteration; the best parameters
    /// seen before are returned.
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss with the scheduled reprojection weight.
    pub loss: f64,
    /// Loss with full weights.
    pub full_loss: f64,
    pub best_loss: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_iteration: usize,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

/// Which coordinates move during descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub fixed_views: Vec<bool>,
    pub frozen_axes: Vec<Option<Vector3<f64>>>,
    pub refine_intrinsics: bool,
    pub shared_focal: bool,
}

impl Constraints {
    pub fn from_init(init: &Initialization, cfg: &OptimizerConfig) -> Self {
        Self {
            fixed_views: (0..init.anchors.len()).map(|v| init.anchors[v] == v).collect(),
            frozen_axes: init.frozen_axes.clone(),
            refine_intrinsics: cfg.refine_intrinsics,
            shared_focal: cfg.shared_focal,
        }
    }
}

fn step_sizes(params: &ParameterBlock, cons: &Constraints, cfg: &OptimizerConfig) -> Vec<f64> {
    let nv = params.view_count();
    let nc = params.camera_count();
    let m = &cfg.multipliers;
    let mut lr = vec![0.0; params.dim()];
    for v in 0..nv {
        if cons.fixed_views[v] {
            continue;
        }
        lr[v * 6..v * 6 + 6].fill(m.poses);
        lr[nv * 6 + v] = m.scales;
    }
    let base = nv * 7;
    for c in 0..nc {
        if cons.refine_intrinsics {
            for (i, k) in params.intrinsics[c].as_array().iter().enumerate() {
                lr[base + c * 4 + i] = m.intrinsics * k.abs();
            }
        }
        lr[base + nc * 4 + c] = m.scales;
        let off = base + nc * 5 + c * 6;
        lr[off..off + 6].fill(m.extrinsics);
    }
    lr
}

fn tie_focal(g: &mut Gradient) {
    for k in g.intrinsics.iter_mut() {
        let s = k[0] + k[1];
        k[0] = s;
        k[1] = s;
    }
}

fn project_frozen(params: &mut ParameterBlock, before: &ParameterBlock, cons: &Constraints) {
    for (c, axis) in cons.frozen_axes.iter().enumerate() {
        if let Some(a) = axis {
            let t = params.extrinsics[c].translation;
            let drift = (t - before.extrinsics[c].translation).dot(a);
            params.extrinsics[c].translation = t - a * drift;
        }
    }
}

/// Adam descent on the manifold with a cosine step schedule, a warmup that
/// holds the reprojection term at zero weight, and best-so-far tracking.
pub fn minimize(
    params: &ParameterBlock,
    problem: &Problem,
    cons: &Constraints,
    cfg: &OptimizerConfig,
) -> Result<(ParameterBlock, ConvergenceLog)> {
    cfg.validate()?;
    let full = cfg.loss_options();
    let initial_loss = problem.total_loss(params, &full)?.total;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let n = cfg.max_iterations;
    let warm_end = (cfg.warmup * n as f64).floor() as usize;
    let ramp_end = ((cfg.warmup + cfg.ramp) * n as f64).floor() as usize;
    let ramp = |it: usize| {
        if it < warm_end {
            0.0
        } else if it >= ramp_end {
            1.0
        } else {
            (it - warm_end) as f64 / (ramp_end - warm_end) as f64
        }
    };
    let lr_base = step_sizes(params, cons, cfg);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-12);
    let dim = params.dim();
    let nv = params.view_count();
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut current = params.clone();
    let mut best = (initial_loss, params.clone(), 0usize);
    // lowest full loss since the reprojection term reached full weight
    let mut phase_best = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n.min(4096));
    let mut termination = Termination::MaxIterations;

    for it in 0..n {
        let r = ramp(it);
        let mut opts = full;
        opts.weights.w2d *= r;
        let (report, grad) = problem.evaluate(&current, &opts, true)?;
        let full_loss = report.sum_of_terms(&full.weights);
        if !(full_loss.is_finite() && report.total.is_finite()) {
            warn!("loss became non-finite at iteration {it}; keeping the best parameters");
            termination = Termination::NonFinite(it);
            break;
        }
        if full_loss < best.0 {
            best = (full_loss, current.clone(), it);
        }
        let decay = cfg.final_step
            + (1.0 - cfg.final_step) * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / n as f64).cos());
        let step = cfg.step * decay;
        records.push(IterationRecord {
            iteration: it,
            loss: report.total,
            full_loss,
            best_loss: best.0,
            step,
        });
        if it >= ramp_end {
            let prev = phase_best.last().copied().unwrap_or(f64::INFINITY);
            phase_best.push(full_loss.min(prev));
        }
        if phase_best.len() > cfg.window {
            let now = phase_best[phase_best.len() - 1];
            let old = phase_best[phase_best.len() - 1 - cfg.window];
            if old <= 0.0 || (old - now) / old < cfg.tolerance {
                termination = Termination::Converged;
                break;
            }
        }

        let mut grad = grad.expect("gradient requested");
        if cons.shared_focal {
            tie_focal(&mut grad);
        }
        let g = grad.to_flat();
        let free_zero = |g: &[f64]| g.iter().zip(&lr_base).all(|(g, l)| *l == 0.0 || *g == 0.0);
        if free_zero(&g) {
            // a down-weighted reprojection term may still pull
            let stationary = r == 1.0 || {
                let mut full_grad = problem.gradient(&current, &full)?;
                if cons.shared_focal {
                    tie_focal(&mut full_grad);
                }
                free_zero(&full_grad.to_flat())
            };
            if stationary {
                termination = Termination::Stationary;
                break;
            }
        }
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut delta = vec![0.0; dim];
        let sigma_range = nv * 6..nv * 7;
        for i in 0..dim {
            if lr_base[i] == 0.0 || (it < warm_end && cfg.warmup_fixed_scales && sigma_range.contains(&i)) {
                continue;
            }
            m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m1[i] / c1;
            let vh = m2[i] / c2;
            delta[i] = -step * lr_base[i] * mh / (vh.sqrt() + eps);
        }
        if delta.iter().all(|d| *d == 0.0) {
            continue;
        }
        let mut next = current.retract(&delta);
        project_frozen(&mut next, &current, cons);
        if it % 200 == 0 {
            debug!("iteration {it}: loss {:.6e} (full {:.6e}), step {:.2e}", report.total, full_loss, step);
        }
        current = next;
    }

    if !matches!(termination, Termination::NonFinite(_)) {
        let last = problem.total_loss(&current, &full)?.total;
        if last.is_finite() && last < best.0 {
            best = (last, current, records.len());
        }
    }
    info!(
        "descent finished after {} iterations ({:?}): loss {:.6e} -> {:.6e}",
        records.len(),
        termination,
        initial_loss,
        best.0
    );
    Ok((
        best.1,
        ConvergenceLog {
            initial_loss,
            final_loss: best.0,
            best_iteration: best.2,
            records,
            termination,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraResult {
    /// `X_j = T^R_{C_j}`.
    pub extrinsics: RigidTransform,
    /// Metric scale of this camera's pointmaps.
    pub lambda: f64,
    /// Optimized scale of the camera motions of this camera's component.
    pub motion_scale: f64,
    pub intrinsics: Intrinsics,
    /// Mean hand-eye residual norm over this camera's motions.
    pub cal_residual: f64,
    pub flags: CameraFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewResult {
    pub camera: usize,
    pub pose_index: usize,
    /// Metric `T^{R_0}_{C_v}`.
    pub pose: RigidTransform,
    pub sigma: f64,
    /// Factor from stored depth to meters.
    pub depth_scale: f64,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub cameras: Vec<CameraResult>,
    pub views: Vec<ViewResult>,
    /// Robot poses `T^{R_0}_{R_i}` used for the calibration.
    pub robot_poses: Vec<RigidTransform>,
    /// Every valid pixel of every view, metric, in `R_0`.
    pub cloud: Vec<Vector3<f64>>,
    pub ground_plane: Option<PlaneModel>,
    pub log: ConvergenceLog,
    pub params: ParameterBlock,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    pub fn extrinsics(&self) -> Vec<RigidTransform> {
        self.cameras.iter().map(|c| c.extrinsics).collect()
    }

    /// Lifts pixel observations of a view to metric points in `R_0`.
    pub fn lift(&self, view: &ViewRecord, pixels: &[Vector2<f64>]) -> Result<Option<Vec<Vector3<f64>>>> {
        let vr = &self.views[view.id];
        let k = &self.cameras[vr.camera].intrinsics;
        crate::eval::lift_corners(view, pixels, k, &vr.pose, vr.depth_scale)
    }
}

/// Maps a component's world frame into `R_0`: the anchor's metric pose.
fn anchor_frame(
    params: &ParameterBlock,
    problem: &Problem,
    traj: &RobotTrajectory,
    anchor: usize,
) -> (RigidTransform, f64) {
    let info = problem.views[anchor];
    let frame = *traj.pose(info.pose_index) * params.extrinsics[info.camera];
    (frame, params.lambda(info.camera))
}

fn metric_views(
    params: &ParameterBlock,
    problem: &Problem,
    traj: &RobotTrajectory,
    anchors: &[usize],
) -> Vec<ViewResult> {
    (0..problem.view_count())
        .map(|v| {
            let (frame, lambda) = anchor_frame(params, problem, traj, anchors[v]);
            let p = &params.poses[v];
            let sigma = params.sigma(v);
            ViewResult {
                camera: problem.views[v].camera,
                pose_index: problem.views[v].pose_index,
                pose: frame * RigidTransform::new(p.rotation, p.translation * lambda),
                sigma,
                depth_scale: sigma * lambda,
                anchor: anchors[v],
            }
        })
        .collect()
}

/// Every valid pixel of every view placed in `R_0` with the views' metric
/// poses and depth scales, in view order.
pub fn metric_cloud(records: &[ViewRecord], views: &[ViewResult], intrinsics: &[Intrinsics]) -> Vec<Vector3<f64>> {
    let per_view: Vec<Vec<Vector3<f64>>> = records
        .par_iter()
        .map(|rec| {
            let vr = &views[rec.id];
            let k = &intrinsics[vr.camera];
            let depth = rec.depth();
            let mut out = Vec::new();
            for row in 0..depth.height {
                for col in 0..depth.width {
                    if let Some(z) = depth.get(col, row) {
                        let ray = k.ray(&Vector2::new(col as f64, row as f64));
                        out.push(vr.pose.apply(&(ray * (z * vr.depth_scale))));
                    }
                }
            }
            out
        })
        .collect();
    per_view.into_iter().flatten().collect()
}

/// Fits the floor and sets each flagged camera's offset along its
/// unobservable axis to its mean height above it.
fn recover_heights(
    prep: &Prepared,
    params: &mut ParameterBlock,
    init: &Initialization,
    flags: &mut [CameraFlags],
    traj: &RobotTrajectory,
    cfg: &OptimizerConfig,
    warnings: &mut Vec<String>,
) -> Result<Option<PlaneModel>> {
    let views = metric_views(params, &prep.problem, traj, &init.anchors);
    let masked = prep.records.iter().any(|r| r.ground_mask.is_some());
    let mut points = Vec::new();
    for rec in &prep.records {
        if masked && rec.ground_mask.is_none() {
            continue;
        }
        let vr = &views[rec.id];
        let k = &params.intrinsics[vr.camera];
        let depth = rec.depth();
        for row in 0..depth.height {
            for col in 0..depth.width {
                let i = row * depth.width + col;
                if let Some(m) = &rec.ground_mask {
                    if !m.floor[i] {
                        continue;
                    }
                }
                if let Some(z) = depth.get(col, row) {
                    let ray = k.ray(&Vector2::new(col as f64, row as f64));
                    points.push(vr.pose.apply(&(ray * (z * vr.depth_scale))));
                }
            }
        }
    }
    let min_ratio = if masked {
        ground::MASKED_CONSENSUS
    } else {
        let msg = "no ground masks: fitting the floor to the whole cloud".to_string();
        warn!("{msg}");
        warnings.push(msg);
        ground::UNMASKED_CONSENSUS
    };
    let fit = ground::fit_plane_with(
        &points,
        &RansacConfig {
            iterations: cfg.ransac_iterations,
            threshold: cfg.ransac_threshold,
            min_inlier_ratio: min_ratio,
            seed: cfg.seed,
        },
    )?;
    let centroid = views.iter().map(|v| v.pose.translation).sum::<Vector3<f64>>() / views.len() as f64;
    let plane = fit.plane.oriented_toward(&centroid);
    for (j, axis) in init.frozen_axes.iter().enumerate() {
        let Some(axis) = axis else { continue };
        let heights: Vec<f64> = views
            .iter()
            .filter(|v| v.camera == j)
            .map(|v| ground::camera_height(&plane, &v.pose.translation))
            .collect();
        let est = ground::recover_z(&heights)?;
        let a = if axis.dot(&plane.normal) < 0.0 { -axis } else { *axis };
        let t = params.extrinsics[j].translation;
        params.extrinsics[j].translation = t - a * t.dot(&a) + a * est.mean;
        flags[j].z_recovered = Some((est.mean, est.std));
        info!("camera {j}: height above the floor {:.4} m (spread {:.4})", est.mean, est.std);
    }
    Ok(Some(plane))
}

/// Zeroes the weight of every match flagged as an outlier. Returns how
/// many were changed.
pub fn gate_matches(problem: &mut Problem, inliers: &[Vec<bool>]) -> usize {
    let mut count = 0;
    for (e, flags) in problem.edges.iter_mut().zip(inliers) {
        for (m, ok) in e.matches.iter_mut().zip(flags) {
            if !ok && m.weight > 0.0 {
                m.weight = 0.0;
                count += 1;
            }
        }
    }
    count
}

/// Full pipeline: fuse, build the graph, initialize, minimize and assemble
/// the metric result in `R_0`.
pub fn solve(inputs: &SceneInputs, traj: &RobotTrajectory, cfg: &OptimizerConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let mut prep = prepare(inputs, traj, cfg)?;
    let init = initialize(&prep, cfg)?;
    let gated = gate_matches(&mut prep.problem, &init.inliers);
    if gated > 0 {
        info!("{gated} matches disagree with their edge registration and carry zero weight");
    }
    let cons = Constraints::from_init(&init, cfg);
    let (params, log) = minimize(&init.params, &prep.problem, &cons, cfg)?;
    let mut warnings = init.warnings.clone();
    if let Termination::NonFinite(it) = log.termination {
        warn!("descent stopped on a non-finite loss at iteration {it}");
        warnings.push(format!("non-finite loss at iteration {it}; result is the best iterate before it"));
    }
    assemble(&prep, &init, params, log, warnings, traj, cfg, true)
}

/// Classical baseline: the closed-form hand-eye solution on the registered
/// camera motions, without descent and without ground-plane height
/// recovery. Unobservable translation components stay flagged.
pub fn closed_form(inputs: &SceneInputs, traj: &RobotTrajectory, cfg: &OptimizerConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let prep = prepare(inputs, traj, cfg)?;
    let init = initialize(&prep, cfg)?;
    let loss = prep.problem.total_loss(&init.params, &cfg.loss_options())?.total;
    let log = ConvergenceLog {
        initial_loss: loss,
        final_loss: loss,
        best_iteration: 0,
        records: Vec::new(),
        termination: Termination::MaxIterations,
    };
    let warnings = init.warnings.clone();
    assemble(&prep, &init, init.params.clone(), log, warnings, traj, cfg, false)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    prep: &Prepared,
    init: &Initialization,
    mut params: ParameterBlock,
    log: ConvergenceLog,
    mut warnings: Vec<String>,
    traj: &RobotTrajectory,
    cfg: &OptimizerConfig,
    recover: bool,
) -> Result<CalibrationResult> {
    let mut flags = init.flags.clone();

    let nc = prep.problem.camera_count;
    // motion scales within one component should agree
    let mut comps: Vec<usize> = init.anchors.clone();
    comps.sort_unstable();
    comps.dedup();
    for c in comps {
        let cams: Vec<usize> = (0..nc)
            .filter(|&j| prep.problem.views.iter().enumerate().any(|(v, i)| i.camera == j && init.anchors[v] == c))
            .collect();
        let ls: Vec<f64> = cams.iter().map(|&j| params.lambda(j)).collect();
        let (lo, hi) = ls.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(*l), hi.max(*l)));
        if cams.len() > 1 && hi / lo - 1.0 > SCALE_DISAGREEMENT {
            let msg = format!(
                "scale disagreement in the component of view {c}: motion scales {ls:?} differ by more than {}%",
                SCALE_DISAGREEMENT * 100.0
            );
            warn!("{msg}");
            warnings.push(msg);
            for &j in &cams {
                flags[j].scale_disagreement = true;
            }
        }
    }

    let ground_plane = if recover && init.frozen_axes.iter().any(Option::is_some) {
        match recover_heights(prep, &mut params, init, &mut flags, traj, cfg, &mut warnings) {
            Ok(p) => p,
            Err(e) => {
                let msg = format!("ground-plane height recovery failed: {e}");
                warn!("{msg}");
                warnings.push(msg);
                None
            }
        }
    } else {
        None
    };

    let views = metric_views(&params, &prep.problem, traj, &init.anchors);
    let cloud = metric_cloud(&prep.records, &views, &params.intrinsics);
    let report = prep.problem.total_loss(&params, &cfg.loss_options())?;
    let cameras = (0..nc)
        .map(|j| {
            let own: Vec<&ViewResult> = views.iter().filter(|v| v.camera == j).collect();
            let mean_log = own.iter().map(|v| v.depth_scale.ln()).sum::<f64>() / own.len() as f64;
            let count = prep.problem.motions[j].len().max(1);
            CameraResult {
                extrinsics: params.extrinsics[j],
                lambda: mean_log.exp(),
                motion_scale: params.lambda(j),
                intrinsics: params.intrinsics[j],
                cal_residual: report.lcal[j] / count as f64,
                flags: flags[j],
            }
        })
        .collect();
    Ok(CalibrationResult {
        cameras,
        views,
        robot_poses: traj.poses().to_vec(),
        cloud,
        ground_plane,
        log,
        params,
        warnings,
    })
}
