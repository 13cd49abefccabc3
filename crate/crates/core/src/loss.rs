//! The unified calibration loss and its exact gradient.
//!
//! Terms per camera `j`: 3D matching (`l3d`), symmetric reprojection
//! (`l2d`), and the scaled hand-eye residual (`lcal`). Terms per camera pair:
//! rig rigidity (`lcross`). Poses are perturbed on the left, `exp(d) * T`;
//! depth scales and metric scales are optimized in log space.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generator, Intrinsics, RigidTransform, Tangent6, MIN_DEPTH};
use crate::graph::SceneGraph;
use crate::pointmap::ViewRecord;

/// Residual norms at or below this are treated as converged: they add their
/// value to the loss but nothing to the gradient.
pub const ZERO_RESIDUAL: f64 = 1e-9;

/// Robot poses `T^{R_0}_{R_i}`, indexed by pose index.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotTrajectory {
    poses: Vec<RigidTransform>,
}

impl RobotTrajectory {
    pub fn new(poses: Vec<RigidTransform>) -> Result<Self> {
        let first = poses.first().ok_or(Error::EmptyInput)?;
        let dev = (first.to_matrix() - Matrix4::identity()).norm();
        if dev > 1e-9 {
            return Err(Error::FirstPoseNotIdentity(dev));
        }
        if poses
            .iter()
            .any(|p| !p.translation.iter().all(|x| x.is_finite()))
        {
            return Err(Error::Parse("non-finite robot pose".into()));
        }
        Ok(Self { poses })
    }

    /// Re-expresses arbitrary base-frame poses relative to the first one.
    pub fn from_absolute(poses: &[RigidTransform]) -> Result<Self> {
        let first = poses.first().ok_or(Error::EmptyInput)?.inverse();
        let mut rel: Vec<_> = poses.iter().map(|p| first * *p).collect();
        rel[0] = RigidTransform::identity();
        Self::new(rel)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> &RigidTransform {
        &self.poses[i]
    }

    /// Relative robot motion from pose `i` to pose `k`.
    pub fn motion(&self, i: usize, k: usize) -> RigidTransform {
        self.poses[i].inverse() * self.poses[k]
    }
}

/// Every optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    /// `T^W_C` per view.
    pub poses: Vec<RigidTransform>,
    /// `ln sigma` per view.
    pub log_sigma: Vec<f64>,
    pub intrinsics: Vec<Intrinsics>,
    /// `ln lambda` per camera.
    pub log_lambda: Vec<f64>,
    /// `X_j = T^R_{C_j}` per camera.
    pub extrinsics: Vec<RigidTransform>,
}

impl ParameterBlock {
    pub fn view_count(&self) -> usize {
        self.poses.len()
    }

    pub fn camera_count(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn sigma(&self, view: usize) -> f64 {
        self.log_sigma[view].exp()
    }

    pub fn lambda(&self, camera: usize) -> f64 {
        self.log_lambda[camera].exp()
    }

    /// Number of tangent coordinates.
    pub fn dim(&self) -> usize {
        self.view_count() * 7 + self.camera_count() * 11
    }

    /// Applies a flat tangent increment laid out like [`Gradient::to_flat`].
    pub fn retract(&self, delta: &[f64]) -> ParameterBlock {
        assert_eq!(delta.len(), self.dim());
        let mut out = self.clone();
        let nv = self.view_count();
        for v in 0..nv {
            let d = Vector6::from_column_slice(&delta[v * 6..v * 6 + 6]);
            out.poses[v] = self.poses[v].retract(&Tangent6(d));
            out.log_sigma[v] += delta[nv * 6 + v];
        }
        let base = nv * 7;
        let nc = self.camera_count();
        for c in 0..nc {
            let mut k = self.intrinsics[c].as_array();
            for (i, kk) in k.iter_mut().enumerate() {
                *kk += delta[base + c * 4 + i];
            }
            out.intrinsics[c] = self.intrinsics[c].with_params(k);
            out.log_lambda[c] += delta[base + nc * 4 + c];
            let off = base + nc * 5 + c * 6;
            let d = Vector6::from_column_slice(&delta[off..off + 6]);
            out.extrinsics[c] = self.extrinsics[c].retract(&Tangent6(d));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let pose_ok = |p: &RigidTransform| {
            p.translation.iter().all(|x| x.is_finite())
                && p.rotation.quaternion().coords.iter().all(|x| x.is_finite())
        };
        self.poses.iter().all(pose_ok)
            && self.extrinsics.iter().all(pose_ok)
            && self.log_sigma.iter().all(|x| x.is_finite())
            && self.log_lambda.iter().all(|x| x.is_finite())
            && self
                .intrinsics
                .iter()
                .all(|k| k.as_array().iter().all(|x| x.is_finite()))
    }
}

/// Tangent-space gradient, one block per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub poses: Vec<Vector6<f64>>,
    pub log_sigma: Vec<f64>,
    pub intrinsics: Vec<[f64; 4]>,
    pub log_lambda: Vec<f64>,
    pub extrinsics: Vec<Vector6<f64>>,
}

impl Gradient {
    pub fn zeros(views: usize, cameras: usize) -> Self {
        Self {
            poses: vec![Vector6::zeros(); views],
            log_sigma: vec![0.0; views],
            intrinsics: vec![[0.0; 4]; cameras],
            log_lambda: vec![0.0; cameras],
            extrinsics: vec![Vector6::zeros(); cameras],
        }
    }

    /// Layout: pose tangents, log sigmas, intrinsics, log lambdas, extrinsic tangents.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.poses {
            out.extend(p.iter());
        }
        out.extend(&self.log_sigma);
        for k in &self.intrinsics {
            out.extend(k);
        }
        out.extend(&self.log_lambda);
        for x in &self.extrinsics {
            out.extend(x.iter());
        }
        out
    }

    pub fn from_flat(flat: &[f64], views: usize, cameras: usize) -> Self {
        let mut g = Self::zeros(views, cameras);
        for v in 0..views {
            g.poses[v] = Vector6::from_column_slice(&flat[v * 6..v * 6 + 6]);
            g.log_sigma[v] = flat[views * 6 + v];
        }
        let base = views * 7;
        for c in 0..cameras {
            g.intrinsics[c].copy_from_slice(&flat[base + c * 4..base + c * 4 + 4]);
            g.log_lambda[c] = flat[base + cameras * 4 + c];
            let off = base + cameras * 5 + c * 6;
            g.extrinsics[c] = Vector6::from_column_slice(&flat[off..off + 6]);
        }
        g
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Multipliers of the four loss families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w3d: f64,
    pub w2d: f64,
    pub wcal: f64,
    pub wcross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w3d: 1.0,
            w2d: 1.0,
            wcal: 1.0,
            wcross: 1.0,
        }
    }
}

/// Huber thresholds for the scene terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Huber {
    /// Meters.
    pub delta_3d: f64,
    /// Pixels.
    pub delta_2d: f64,
}

impl Default for Huber {
    fn default() -> Self {
        Self {
            delta_3d: 0.1,
            delta_2d: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Weight of the rotation block in the homogeneous-matrix residuals.
    pub w_rot: f64,
    /// Weight of the translation column in the homogeneous-matrix residuals.
    pub w_trans: f64,
    pub robust: Option<Huber>,
    pub cross_enabled: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            w_rot: 1.0,
            w_trans: 1.0,
            robust: None,
            cross_enabled: true,
        }
    }
}

/// Value of every loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Weighted sum of all terms.
    pub total: f64,
    pub l3d: Vec<f64>,
    pub l2d: Vec<f64>,
    pub lcal: Vec<f64>,
    /// `((n, m), value)` for each camera pair.
    pub lcross: Vec<((usize, usize), f64)>,
    pub residuals_3d: usize,
    pub residuals_2d: usize,
    /// Reprojections skipped because of non-positive depth.
    pub dropped_2d: usize,
    pub residuals_cal: usize,
    pub residuals_cross: usize,
}

impl LossReport {
    /// Recomputes the weighted total from the individual terms.
    pub fn sum_of_terms(&self, w: &LossWeights) -> f64 {
        let mut s = 0.0;
        for j in 0..self.l3d.len() {
            s += w.w3d * self.l3d[j] + w.w2d * self.l2d[j] + w.wcal * self.lcal[j];
        }
        for (_, v) in &self.lcross {
            s += w.wcross * v;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreparedMatch {
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    pub depth_a: f64,
    pub depth_b: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEdge {
    pub a: usize,
    pub b: usize,
    /// Camera this edge's scene terms are booked under (camera of `min(a, b)`).
    pub camera: usize,
    pub matches: Vec<PreparedMatch>,
}

/// Consecutive images of one camera: views `from`, `to` and robot motion `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraMotion {
    pub from: usize,
    pub to: usize,
    pub robot: RigidTransform,
}

/// Consecutive shared pose indices of two cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossStep {
    pub n_from: usize,
    pub n_to: usize,
    pub m_from: usize,
    pub m_to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossPair {
    pub n: usize,
    pub m: usize,
    pub steps: Vec<CrossStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewInfo {
    pub camera: usize,
    pub pose_index: usize,
}

/// Static data the loss needs: views, prepared correspondences and motions.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub views: Vec<ViewInfo>,
    pub camera_count: usize,
    pub edges: Vec<PreparedEdge>,
    /// Per camera, ordered by pose index.
    pub motions: Vec<Vec<CameraMotion>>,
    pub cross_pairs: Vec<CrossPair>,
}

impl Problem {
    pub fn new(views: &[ViewRecord], graph: &SceneGraph, traj: &RobotTrajectory) -> Result<Self> {
        if graph.view_count != views.len() {
            return Err(Error::DimensionMismatch(format!(
                "graph has {} views, scene has {}",
                graph.view_count,
                views.len()
            )));
        }
        for (i, v) in views.iter().enumerate() {
            if v.id != i {
                return Err(Error::Parse(format!("view at position {i} has id {}", v.id)));
            }
            if v.pose_index >= traj.len() {
                return Err(Error::PoseIndexMismatch(format!(
                    "view {} uses pose index {} but the trajectory has {} poses",
                    v.id,
                    v.pose_index,
                    traj.len()
                )));
            }
        }
        let camera_count = views.iter().map(|v| v.camera + 1).max().unwrap_or(0);
        let mut by_camera: Vec<Vec<(usize, usize)>> = vec![Vec::new(); camera_count];
        for v in views {
            by_camera[v.camera].push((v.pose_index, v.id));
        }
        for (j, list) in by_camera.iter_mut().enumerate() {
            list.sort();
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Parse(format!(
                    "camera {j} has two images at the same pose index"
                )));
            }
        }

        let depths: Vec<_> = views.iter().map(|v| v.depth()).collect();
        let mut edges = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let mut matches = Vec::with_capacity(e.matches.pairs.len());
            for m in &e.matches.pairs {
                let bad = |p: &Vector2<f64>| Error::InvalidMatchedPixel {
                    view_a: e.a,
                    view_b: e.b,
                    u: p.x,
                    v: p.y,
                };
                let depth_a = depths[e.a].sample(&m.pixel_a).ok_or_else(|| bad(&m.pixel_a))?;
                let depth_b = depths[e.b].sample(&m.pixel_b).ok_or_else(|| bad(&m.pixel_b))?;
                matches.push(PreparedMatch {
                    pixel_a: m.pixel_a,
                    pixel_b: m.pixel_b,
                    depth_a,
                    depth_b,
                    weight: m.weight,
                });
            }
            edges.push(PreparedEdge {
                a: e.a,
                b: e.b,
                camera: views[e.a.min(e.b)].camera,
                matches,
            });
        }

        let motions = by_camera
            .iter()
            .map(|list| {
                list.windows(2)
                    .map(|w| CameraMotion {
                        from: w[0].1,
                        to: w[1].1,
                        robot: traj.motion(w[0].0, w[1].0),
                    })
                    .collect()
            })
            .collect();

        let mut cross_pairs = Vec::new();
        for n in 0..camera_count {
            for m in n + 1..camera_count {
                let shared: Vec<(usize, usize)> = by_camera[n]
                    .iter()
                    .filter_map(|&(pi, vn)| {
                        by_camera[m]
                            .iter()
                            .find(|&&(pk, _)| pk == pi)
                            .map(|&(_, vm)| (vn, vm))
                    })
                    .collect();
                if shared.len() >= 2 {
                    let steps = shared
                        .windows(2)
                        .map(|w| CrossStep {
                            n_from: w[0].0,
                            n_to: w[1].0,
                            m_from: w[0].1,
                            m_to: w[1].1,
                        })
                        .collect();
                    cross_pairs.push(CrossPair { n, m, steps });
                }
            }
        }

        Ok(Problem {
            views: views
                .iter()
                .map(|v| ViewInfo {
                    camera: v.camera,
                    pose_index: v.pose_index,
                })
                .collect(),
            camera_count,
            edges,
            motions,
            cross_pairs,
        })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    fn check_params(&self, params: &ParameterBlock) -> Result<()> {
        if params.view_count() != self.view_count() || params.camera_count() != self.camera_count
        {
            return Err(Error::DimensionMismatch(format!(
                "parameters for {} views / {} cameras, problem has {} / {}",
                params.view_count(),
                params.camera_count(),
                self.view_count(),
                self.camera_count
            )));
        }
        Ok(())
    }

    pub fn loss_3d(&self, params: &ParameterBlock, camera: usize, opts: &LossOptions) -> Result<f64> {
        Ok(self.evaluate(params, opts, false)?.0.l3d[camera])
    }

    pub fn loss_2d(&self, params: &ParameterBlock, camera: usize, opts: &LossOptions) -> Result<f64> {
        Ok(self.evaluate(params, opts, false)?.0.l2d[camera])
    }

    pub fn loss_cal(&self, params: &ParameterBlock, camera: usize, opts: &LossOptions) -> Result<f64> {
        self.check_params(params)?;
        let found = self.motions[camera].len() + 1;
        if found < 2 {
            return Err(Error::InsufficientPoses { camera, found: found - 1 });
        }
        let mut grad = None;
        Ok(self.cal_term(params, camera, opts, &mut grad).0)
    }

    pub fn loss_cross(&self, params: &ParameterBlock, n: usize, m: usize, opts: &LossOptions) -> Result<f64> {
        self.check_params(params)?;
        let pair = self
            .cross_pairs
            .iter()
            .find(|p| (p.n, p.m) == (n.min(m), n.max(m)))
            .ok_or_else(|| {
                Error::PoseIndexMismatch(format!(
                    "cameras {n} and {m} share fewer than 2 pose indices"
                ))
            })?;
        let mut grad = None;
        Ok(self.cross_term(params, pair, opts, &mut grad).0)
    }

    pub fn total_loss(&self, params: &ParameterBlock, opts: &LossOptions) -> Result<LossReport> {
        Ok(self.evaluate(params, opts, false)?.0)
    }

    pub fn gradient(&self, params: &ParameterBlock, opts: &LossOptions) -> Result<Gradient> {
        Ok(self.evaluate(params, opts, true)?.1.expect("gradient requested"))
    }

    /// Loss report and, if requested, the gradient in one pass.
    ///
    /// Edge terms are computed in parallel but reduced in edge order, so the
    /// result does not depend on the thread count.
    pub fn evaluate(
        &self,
        params: &ParameterBlock,
        opts: &LossOptions,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Gradient>)> {
        self.check_params(params)?;
        let nc = self.camera_count;
        let states: Vec<ViewState> = (0..self.view_count())
            .map(|v| ViewState::new(params, v, self.views[v].camera))
            .collect();

        let edge_results: Vec<EdgeEval> = self
            .edges
            .par_iter()
            .map(|e| edge_eval(e, &states, opts, want_grad))
            .collect();

        let mut report = LossReport {
            total: 0.0,
            l3d: vec![0.0; nc],
            l2d: vec![0.0; nc],
            lcal: vec![0.0; nc],
            lcross: Vec::new(),
            residuals_3d: 0,
            residuals_2d: 0,
            dropped_2d: 0,
            residuals_cal: 0,
            residuals_cross: 0,
        };
        let mut grad = want_grad.then(|| Gradient::zeros(self.view_count(), nc));
        let w = &opts.weights;
        for (e, r) in self.edges.iter().zip(&edge_results) {
            report.l3d[e.camera] += r.l3d;
            report.l2d[e.camera] += r.l2d;
            report.residuals_3d += r.n3d;
            report.residuals_2d += r.n2d;
            report.dropped_2d += r.dropped;
            if let (Some(g), Some(eg)) = (grad.as_mut(), r.grad.as_ref()) {
                let ca = self.views[e.a].camera;
                let cb = self.views[e.b].camera;
                g.poses[e.a] += eg.pose_a_3d * w.w3d + eg.pose_a_2d * w.w2d;
                g.poses[e.b] += eg.pose_b_3d * w.w3d + eg.pose_b_2d * w.w2d;
                g.log_sigma[e.a] += eg.sigma_a[0] * w.w3d + eg.sigma_a[1] * w.w2d;
                g.log_sigma[e.b] += eg.sigma_b[0] * w.w3d + eg.sigma_b[1] * w.w2d;
                for i in 0..4 {
                    g.intrinsics[ca][i] += eg.k_a_3d[i] * w.w3d + eg.k_a_2d[i] * w.w2d;
                    g.intrinsics[cb][i] += eg.k_b_3d[i] * w.w3d + eg.k_b_2d[i] * w.w2d;
                }
            }
        }

        let mut cal_grad = want_grad.then(|| Gradient::zeros(self.view_count(), nc));
        for j in 0..nc {
            let (v, n) = self.cal_term(params, j, opts, &mut cal_grad);
            report.lcal[j] = v;
            report.residuals_cal += n;
        }
        if let (Some(g), Some(cg)) = (grad.as_mut(), cal_grad.as_ref()) {
            g.add_scaled(cg, w.wcal);
        }

        if opts.cross_enabled {
            let mut cross_grad = want_grad.then(|| Gradient::zeros(self.view_count(), nc));
            for pair in &self.cross_pairs {
                let (v, n) = self.cross_term(params, pair, opts, &mut cross_grad);
                report.lcross.push(((pair.n, pair.m), v));
                report.residuals_cross += n;
            }
            if let (Some(g), Some(cg)) = (grad.as_mut(), cross_grad.as_ref()) {
                g.add_scaled(cg, w.wcross);
            }
        }

        report.total = report.sum_of_terms(w);
        Ok((report, grad))
    }

    fn cal_term(
        &self,
        params: &ParameterBlock,
        camera: usize,
        opts: &LossOptions,
        grad: &mut Option<Gradient>,
    ) -> (f64, usize) {
        let x = params.extrinsics[camera].to_matrix();
        let lambda = params.lambda(camera);
        let mut total = 0.0;
        for mo in &self.motions[camera] {
            let a = mo.robot.to_matrix();
            let t_to = params.poses[mo.to].to_matrix();
            let t_from_inv = params.poses[mo.from].inverse().to_matrix();
            let b = t_from_inv * t_to;
            let b_l = scale_translation(&b, lambda);
            let d = a * x - x * b_l;
            let (val, dn) = weighted_norm(&d, opts);
            total += val;
            let (Some(g), Some(dn)) = (grad.as_mut(), dn) else {
                continue;
            };
            for k in 0..6 {
                let gk = generator(k);
                let gx = gk * x;
                g.extrinsics[camera][k] += inner(&dn, &(a * gx - gx * b_l));
                // perturbing T_to adds db to B, perturbing T_from subtracts it
                let db = scale_translation(&(t_from_inv * gk * t_to), lambda);
                let dd = inner(&dn, &(x * db));
                g.poses[mo.to][k] -= dd;
                g.poses[mo.from][k] += dd;
            }
            g.log_lambda[camera] += inner(&dn, &(-x * translation_only(&b, lambda)));
        }
        (total, self.motions[camera].len())
    }

    fn cross_term(
        &self,
        params: &ParameterBlock,
        pair: &CrossPair,
        opts: &LossOptions,
        grad: &mut Option<Gradient>,
    ) -> (f64, usize) {
        let (n, m) = (pair.n, pair.m);
        let xn_inv = params.extrinsics[n].inverse().to_matrix();
        let xm = params.extrinsics[m].to_matrix();
        let y = xn_inv * xm;
        let (ln, lm) = (params.lambda(n), params.lambda(m));
        let mut total = 0.0;
        for s in &pair.steps {
            let tn_from_inv = params.poses[s.n_from].inverse().to_matrix();
            let tn_to = params.poses[s.n_to].to_matrix();
            let tm_from_inv = params.poses[s.m_from].inverse().to_matrix();
            let tm_to = params.poses[s.m_to].to_matrix();
            let bn = tn_from_inv * tn_to;
            let bm = tm_from_inv * tm_to;
            let bn_l = scale_translation(&bn, ln);
            let bm_l = scale_translation(&bm, lm);
            let d = bn_l * y - y * bm_l;
            let (val, dn) = weighted_norm(&d, opts);
            total += val;
            let (Some(g), Some(dn)) = (grad.as_mut(), dn) else {
                continue;
            };
            for k in 0..6 {
                let gk = generator(k);
                let dy_n = -(xn_inv * gk * xm);
                let dy_m = xn_inv * gk * xm;
                g.extrinsics[n][k] += inner(&dn, &(bn_l * dy_n - dy_n * bm_l));
                g.extrinsics[m][k] += inner(&dn, &(bn_l * dy_m - dy_m * bm_l));

                let dbn = scale_translation(&(tn_from_inv * gk * tn_to), ln);
                let dd_n = inner(&dn, &(dbn * y));
                g.poses[s.n_to][k] += dd_n;
                g.poses[s.n_from][k] -= dd_n;

                let dbm = scale_translation(&(tm_from_inv * gk * tm_to), lm);
                let dd_m = inner(&dn, &(y * dbm));
                g.poses[s.m_to][k] -= dd_m;
                g.poses[s.m_from][k] += dd_m;
            }
            g.log_lambda[n] += inner(&dn, &(translation_only(&bn, ln) * y));
            g.log_lambda[m] += inner(&dn, &(-y * translation_only(&bm, lm)));
        }
        (total, pair.steps.len())
    }
}

impl Gradient {
    fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.poses.iter_mut().zip(&other.poses) {
            *a += b * s;
        }
        for (a, b) in self.log_sigma.iter_mut().zip(&other.log_sigma) {
            *a += b * s;
        }
        for (a, b) in self.intrinsics.iter_mut().zip(&other.intrinsics) {
            for i in 0..4 {
                a[i] += b[i] * s;
            }
        }
        for (a, b) in self.log_lambda.iter_mut().zip(&other.log_lambda) {
            *a += b * s;
        }
        for (a, b) in self.extrinsics.iter_mut().zip(&other.extrinsics) {
            *a += b * s;
        }
    }
}

fn scale_translation(m: &Matrix4<f64>, lambda: f64) -> Matrix4<f64> {
    let mut out = *m;
    for r in 0..3 {
        out[(r, 3)] *= lambda;
    }
    out
}

/// `[0 | lambda t; 0 0]`, the derivative of `B(lambda)` w.r.t. `ln lambda`.
fn translation_only(m: &Matrix4<f64>, lambda: f64) -> Matrix4<f64> {
    let mut out = Matrix4::zeros();
    for r in 0..3 {
        out[(r, 3)] = m[(r, 3)] * lambda;
    }
    out
}

/// Weighted Frobenius norm of the upper 3x4 block, and its derivative.
fn weighted_norm(d: &Matrix4<f64>, opts: &LossOptions) -> (f64, Option<Matrix4<f64>>) {
    let mut sq = 0.0;
    for r in 0..3 {
        for c in 0..4 {
            let w = if c < 3 { opts.w_rot } else { opts.w_trans };
            sq += w * d[(r, c)] * d[(r, c)];
        }
    }
    let n = sq.sqrt();
    if n <= ZERO_RESIDUAL {
        return (n, None);
    }
    let mut g = Matrix4::zeros();
    for r in 0..3 {
        for c in 0..4 {
            let w = if c < 3 { opts.w_rot } else { opts.w_trans };
            g[(r, c)] = w * d[(r, c)] / n;
        }
    }
    (n, Some(g))
}

fn inner(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Per-view quantities reused by every match.
struct ViewState {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    sigma: f64,
    k: Intrinsics,
}

impl ViewState {
    fn new(params: &ParameterBlock, view: usize, camera: usize) -> Self {
        let pose = &params.poses[view];
        Self {
            rot: pose.rotation.matrix(),
            trans: pose.translation,
            sigma: params.sigma(view),
            k: params.intrinsics[camera],
        }
    }

    /// Constrained point at `pixel` with camera-frame point.
    fn lift(&self, pixel: &Vector2<f64>, depth: f64) -> (Vector3<f64>, Vector3<f64>) {
        let pc = self.k.ray(pixel) * (self.sigma * depth);
        (self.rot * pc + self.trans, pc)
    }

    /// Derivatives of the lifted point w.r.t. (fx, fy, cx, cy), world frame.
    fn lift_intrinsics_jacobian(&self, pixel: &Vector2<f64>, depth: f64) -> [Vector3<f64>; 4] {
        let sz = self.sigma * depth;
        let k = &self.k;
        let c0 = self.rot.column(0).into_owned();
        let c1 = self.rot.column(1).into_owned();
        [
            c0 * (-sz * (pixel.x - k.cx) / (k.fx * k.fx)),
            c1 * (-sz * (pixel.y - k.cy) / (k.fy * k.fy)),
            c0 * (-sz / k.fx),
            c1 * (-sz / k.fy),
        ]
    }
}

#[derive(Default)]
struct EdgeGrad {
    pose_a_3d: Vector6<f64>,
    pose_b_3d: Vector6<f64>,
    pose_a_2d: Vector6<f64>,
    pose_b_2d: Vector6<f64>,
    /// `[3d, 2d]` contributions.
    sigma_a: [f64; 2],
    sigma_b: [f64; 2],
    k_a_3d: [f64; 4],
    k_b_3d: [f64; 4],
    k_a_2d: [f64; 4],
    k_b_2d: [f64; 4],
}

struct EdgeEval {
    l3d: f64,
    l2d: f64,
    n3d: usize,
    n2d: usize,
    dropped: usize,
    grad: Option<EdgeGrad>,
}

/// Value and derivative of the (optionally robustified) residual norm.
#[inline]
fn kernel(norm: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if norm <= d => (norm * norm / (2.0 * d), norm / d),
        Some(d) => (norm - d / 2.0, 1.0),
        None => (norm, 1.0),
    }
}

/// Gradient of a world point w.r.t. the lifting view's parameters, given
/// `g = dL/dchi`.
#[inline]
fn accumulate_lift(
    g: &Vector3<f64>,
    chi: &Vector3<f64>,
    pc: &Vector3<f64>,
    jk: &[Vector3<f64>; 4],
    st: &ViewState,
    pose: &mut Vector6<f64>,
    sigma: &mut f64,
    k: &mut [f64; 4],
) {
    let w = chi.cross(g);
    pose[0] += w.x;
    pose[1] += w.y;
    pose[2] += w.z;
    pose[3] += g.x;
    pose[4] += g.y;
    pose[5] += g.z;
    *sigma += g.dot(&(st.rot * pc));
    for i in 0..4 {
        k[i] += g.dot(&jk[i]);
    }
}

/// One reprojection `y_obs` vs `pi_proj(chi)`. Returns `(value, gradient
/// w.r.t. chi, gradient w.r.t. projecting pose, gradient w.r.t. projecting
/// intrinsics)`, or `None` when the point is behind the projecting camera.
#[inline]
fn reprojection(
    y_obs: &Vector2<f64>,
    chi: &Vector3<f64>,
    proj: &ViewState,
    weight: f64,
    delta: Option<f64>,
    want_grad: bool,
) -> Option<(f64, Option<(Vector3<f64>, Vector6<f64>, [f64; 4])>)> {
    let q = proj.rot.transpose() * (chi - proj.trans);
    if q.z <= MIN_DEPTH {
        return None;
    }
    let k = &proj.k;
    let (xz, yz) = (q.x / q.z, q.y / q.z);
    let r = y_obs - Vector2::new(k.fx * xz + k.cx, k.fy * yz + k.cy);
    let norm = r.norm();
    let (val, dval) = kernel(norm, delta);
    if !want_grad || norm <= ZERO_RESIDUAL {
        return Some((weight * val, if want_grad { Some((Vector3::zeros(), Vector6::zeros(), [0.0; 4])) } else { None }));
    }
    // dL/dpi = -e
    let e = r * (weight * dval / norm);
    let gq = -Vector3::new(
        e.x * k.fx / q.z,
        e.y * k.fy / q.z,
        -(e.x * k.fx * q.x + e.y * k.fy * q.y) / (q.z * q.z),
    );
    let g_chi = proj.rot * gq;
    let w = -chi.cross(&g_chi);
    let pose = Vector6::new(w.x, w.y, w.z, -g_chi.x, -g_chi.y, -g_chi.z);
    let gk = [-e.x * xz, -e.y * yz, -e.x, -e.y];
    Some((weight * val, Some((g_chi, pose, gk))))
}

fn edge_eval(e: &PreparedEdge, states: &[ViewState], opts: &LossOptions, want_grad: bool) -> EdgeEval {
    let sa = &states[e.a];
    let sb = &states[e.b];
    let d3 = opts.robust.map(|h| h.delta_3d);
    let d2 = opts.robust.map(|h| h.delta_2d);
    let mut out = EdgeEval {
        l3d: 0.0,
        l2d: 0.0,
        n3d: 0,
        n2d: 0,
        dropped: 0,
        grad: want_grad.then(EdgeGrad::default),
    };
    for m in &e.matches {
        let (chi_a, pc_a) = sa.lift(&m.pixel_a, m.depth_a);
        let (chi_b, pc_b) = sb.lift(&m.pixel_b, m.depth_b);

        // 3D matching
        let r = chi_a - chi_b;
        let norm = r.norm();
        let (val, dval) = kernel(norm, d3);
        out.l3d += m.weight * val;
        out.n3d += 1;

        // reprojections: a's observation vs b's point, and b's vs a's
        let ra = reprojection(&m.pixel_a, &chi_b, sa, m.weight, d2, want_grad);
        let rb = reprojection(&m.pixel_b, &chi_a, sb, m.weight, d2, want_grad);
        for r in [&ra, &rb] {
            match r {
                Some((v, _)) => {
                    out.l2d += v;
                    out.n2d += 1;
                }
                None => out.dropped += 1,
            }
        }

        let Some(g) = out.grad.as_mut() else { continue };
        let jk_a = sa.lift_intrinsics_jacobian(&m.pixel_a, m.depth_a);
        let jk_b = sb.lift_intrinsics_jacobian(&m.pixel_b, m.depth_b);
        if norm > ZERO_RESIDUAL {
            let g3 = r * (m.weight * dval / norm);
            accumulate_lift(&g3, &chi_a, &pc_a, &jk_a, sa, &mut g.pose_a_3d, &mut g.sigma_a[0], &mut g.k_a_3d);
            accumulate_lift(&(-g3), &chi_b, &pc_b, &jk_b, sb, &mut g.pose_b_3d, &mut g.sigma_b[0], &mut g.k_b_3d);
        }
        if let Some((_, Some((g_chi_b, pose_a, k_a)))) = ra {
            g.pose_a_2d += pose_a;
            for i in 0..4 {
                g.k_a_2d[i] += k_a[i];
            }
            accumulate_lift(&g_chi_b, &chi_b, &pc_b, &jk_b, sb, &mut g.pose_b_2d, &mut g.sigma_b[1], &mut g.k_b_2d);
        }
        if let Some((_, Some((g_chi_a, pose_b, k_b)))) = rb {
            g.pose_b_2d += pose_b;
            for i in 0..4 {
                g.k_b_2d[i] += k_b[i];
            }
            accumulate_lift(&g_chi_a, &chi_a, &pc_a, &jk_a, sa, &mut g.pose_a_2d, &mut g.sigma_a[1], &mut g.k_a_2d);
        }
    }
    out
}
