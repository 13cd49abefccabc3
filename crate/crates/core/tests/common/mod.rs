//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigcal_core::geometry::{Rotation, RigidTransform, Tangent6};
use rigcal_core::graph::{build_graph, SceneGraph, DEFAULT_K_FPS, DEFAULT_K_NN};
use rigcal_core::loss::{ParameterBlock, Problem};
use rigcal_core::synth::{generate, preset, Mode, Scenario, ScenarioConfig};

/// A small scenario for either platform.
pub fn scenario(mode: Mode, cameras: usize, poses: usize, seed: u64) -> Scenario {
    let mut cfg: ScenarioConfig = match mode {
        Mode::Arm => preset("franka-like").unwrap(),
        Mode::Mobile => preset("memroc-like").unwrap(),
    };
    cfg.cameras = cameras;
    cfg.poses = poses;
    cfg.seed = seed;
    cfg.matches_per_edge = 12;
    generate(&cfg).unwrap()
}

pub fn problem(s: &Scenario) -> Problem {
    let records = s.inputs.view_records().unwrap();
    let edges = build_graph(&s.inputs.scores, DEFAULT_K_FPS, DEFAULT_K_NN).unwrap();
    let (graph, _) = SceneGraph::from_edges(records.len(), &edges, &s.inputs.matches).unwrap();
    Problem::new(&records, &graph, &s.trajectory).unwrap()
}

fn tangent(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Tangent6 {
    let mut d = [0.0; 6];
    for (i, x) in d.iter_mut().enumerate() {
        let s = if i < 3 { rot } else { trans };
        *x = rng.random_range(-s..s);
    }
    Tangent6(nalgebra::Vector6::from_column_slice(&d))
}

/// Random parameters near `base`.
pub fn perturb(base: &ParameterBlock, seed: u64) -> ParameterBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = base.clone();
    for pose in &mut p.poses {
        *pose = pose.retract(&tangent(&mut rng, 0.05, 0.03));
    }
    for s in &mut p.log_sigma {
        *s += rng.random_range(-0.1..0.1);
    }
    for k in &mut p.intrinsics {
        let mut a = k.as_array();
        for x in &mut a {
            *x += rng.random_range(-1.0..1.0);
        }
        *k = k.with_params(a);
    }
    for l in &mut p.log_lambda {
        *l += rng.random_range(-0.2..0.2);
    }
    for x in &mut p.extrinsics {
        *x = x.retract(&tangent(&mut rng, 0.1, 0.05));
    }
    p
}

pub fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    RigidTransform::new(Rotation::from_rotation_vector(&w), t)
}

/// Central differences of `f` along each tangent coordinate.
pub fn numeric_gradient(p: &ParameterBlock, h: f64, f: impl Fn(&ParameterBlock) -> f64) -> Vec<f64> {
    let n = p.dim();
    (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = h;
            let plus = f(&p.retract(&d));
            d[i] = -h;
            let minus = f(&p.retract(&d));
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest violation of `|a - n| <= max(rel * max(|a|, |n|), abs)`, as
/// `(index, analytic, numeric)`.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(_, (a, n))| (*a - *n).abs() > (rel * a.abs().max(n.abs())).max(abs))
        .max_by(|x, y| {
            let ex = (x.1 .0 - x.1 .1).abs();
            let ey = (y.1 .0 - y.1 .1).abs();
            ex.total_cmp(&ey)
        })
        .map(|(i, (a, n))| (i, *a, *n))
}

/// Keeps the views accepted by `keep`, renumbering ids, matches and scores.
pub fn subset(
    inputs: &rigcal_core::scene::SceneInputs,
    keep: impl Fn(&rigcal_core::scene::ViewData) -> bool,
) -> rigcal_core::scene::SceneInputs {
    let kept: Vec<usize> = inputs.views.iter().filter(|v| keep(v)).map(|v| v.id).collect();
    let new_id = |old: usize| kept.iter().position(|&k| k == old);
    let views = kept
        .iter()
        .enumerate()
        .map(|(i, &old)| {
            let mut v = inputs.views[old].clone();
            v.id = i;
            v
        })
        .collect();
    let matches = inputs
        .matches
        .iter()
        .filter_map(|m| {
            let (a, b) = (new_id(m.view_a)?, new_id(m.view_b)?);
            let mut m = m.clone();
            m.view_a = a;
            m.view_b = b;
            Some(m)
        })
        .collect();
    let scores = rigcal_core::graph::CovisibilityMatrix::from_fn(kept.len(), |i, j| inputs.scores.get(kept[i], kept[j])).unwrap();
    rigcal_core::scene::SceneInputs {
        views,
        matches,
        scores,
        board: inputs.board.clone(),
    }
}
