//! Sparse co-visibility graph over all views.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::pointmap::MatchSet;

/// Symmetric view-to-view overlap scores in [0, 1] with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CovisibilityMatrix {
    n: usize,
    scores: Vec<f64>,
}

impl CovisibilityMatrix {
    pub fn new(n: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n * n {
            return Err(Error::InvalidScores(format!(
                "expected {} entries, got {}",
                n * n,
                scores.len()
            )));
        }
        for i in 0..n {
            if scores[i * n + i] != 0.0 {
                return Err(Error::InvalidScores(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..n {
                let s = scores[i * n + j];
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::InvalidScores(format!("entry ({i},{j}) = {s} outside [0,1]")));
                }
                if (s - scores[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidScores(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self { n, scores })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    scores[i * n + j] = f(i.min(j), i.max(j));
                }
            }
        }
        Self::new(n, scores)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Union-find over `0..n`.
#[derive(Debug, Clone)]
pub struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when both were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // keep the lowest id as root so component labels are stable
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }

    pub fn component_count(&mut self) -> usize {
        (0..self.parent.len()).filter(|&i| self.find(i) == i).count()
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Farthest-point sampling in `1 - s` dissimilarity, starting from view 0.
pub fn farthest_point_sampling(scores: &CovisibilityMatrix, count: usize) -> Vec<usize> {
    let n = scores.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = vec![0usize];
    let mut min_dist: Vec<f64> = (0..n).map(|j| 1.0 - scores.get(0, j)).collect();
    min_dist[0] = f64::NEG_INFINITY;
    while chosen.len() < count {
        let mut best = None;
        for (j, &d) in min_dist.iter().enumerate() {
            if d == f64::NEG_INFINITY {
                continue;
            }
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((j, d)),
            }
        }
        let Some((next, _)) = best else { break };
        chosen.push(next);
        min_dist[next] = f64::NEG_INFINITY;
        for (j, d) in min_dist.iter_mut().enumerate() {
            if *d != f64::NEG_INFINITY {
                *d = d.min(1.0 - scores.get(next, j));
            }
        }
    }
    chosen
}

/// Default anchor count: 10, or the number of views if smaller.
pub const DEFAULT_K_FPS: usize = 10;
pub const DEFAULT_K_NN: usize = 3;

/// Builds a connected, sparse edge set; see [`build_graph_with`].
pub fn build_graph(
    scores: &CovisibilityMatrix,
    k_fps: usize,
    k_nn: usize,
) -> Result<Vec<(usize, usize)>> {
    build_graph_with(scores, k_fps, k_nn, true)
}

/// Anchors from farthest-point sampling are connected to each other, every
/// other view to its `k_nn` best-scoring neighbors. Only positive-score pairs
/// are used for these two steps. If the result is disconnected and `repair`
/// is set, edges of a maximum-score spanning forest are added until it is
/// connected. Ties always go to the lowest view id.
pub fn build_graph_with(
    scores: &CovisibilityMatrix,
    k_fps: usize,
    k_nn: usize,
    repair: bool,
) -> Result<Vec<(usize, usize)>> {
    let n = scores.len();
    if k_fps == 0 || k_nn == 0 || n < 2 {
        return Err(Error::InvalidScores(format!(
            "need k_fps >= 1, k_nn >= 1 and at least 2 views (got {k_fps}, {k_nn}, {n})"
        )));
    }
    let anchors = farthest_point_sampling(scores, k_fps);
    let mut is_anchor = vec![false; n];
    for &a in &anchors {
        is_anchor[a] = true;
    }

    let mut edges = BTreeSet::new();
    for (i, &a) in anchors.iter().enumerate() {
        for &b in &anchors[i + 1..] {
            if scores.get(a, b) > 0.0 {
                edges.insert(ordered(a, b));
            }
        }
    }
    for v in (0..n).filter(|&v| !is_anchor[v]) {
        let mut neighbors: Vec<usize> = (0..n)
            .filter(|&u| u != v && scores.get(v, u) > 0.0)
            .collect();
        // stable sort keeps lower ids first among equal scores
        neighbors.sort_by(|&a, &b| scores.get(v, b).total_cmp(&scores.get(v, a)));
        for &u in neighbors.iter().take(k_nn) {
            edges.insert(ordered(u, v));
        }
    }

    let mut sets = DisjointSets::new(n);
    for &(a, b) in &edges {
        sets.union(a, b);
    }
    if sets.component_count() > 1 {
        if !repair {
            return Err(Error::GraphDisconnected);
        }
        let mut pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        pairs.sort_by(|&(a, b), &(c, d)| scores.get(c, d).total_cmp(&scores.get(a, b)));
        for (a, b) in pairs {
            if sets.union(a, b) {
                edges.insert((a, b));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// One graph edge and its correspondences, oriented so that
/// `matches.view_a == a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub matches: MatchSet,
}

/// Views plus edges carrying correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub view_count: usize,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    /// Attaches match sets to the selected edges. Edges without any
    /// correspondence are dropped and returned separately.
    pub fn from_edges(
        view_count: usize,
        edges: &[(usize, usize)],
        matches: &[MatchSet],
    ) -> Result<(SceneGraph, Vec<(usize, usize)>)> {
        let mut lookup: HashMap<(usize, usize), &MatchSet> = HashMap::new();
        for m in matches {
            if m.view_a >= view_count {
                return Err(Error::UnknownView(m.view_a));
            }
            if m.view_b >= view_count {
                return Err(Error::UnknownView(m.view_b));
            }
            lookup.insert((m.view_a, m.view_b), m);
        }
        let mut out = Vec::new();
        let mut dropped = Vec::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidScores(format!("self-loop on view {a}")));
            }
            let set = match (lookup.get(&(a, b)), lookup.get(&(b, a))) {
                (Some(m), _) => Some((*m).clone()),
                (None, Some(m)) => Some(m.swapped()),
                _ => None,
            };
            match set {
                Some(m) if !m.pairs.is_empty() => out.push(Edge { a, b, matches: m }),
                _ => dropped.push((a, b)),
            }
        }
        out.sort_by_key(|e| ordered(e.a, e.b));
        out.dedup_by_key(|e| ordered(e.a, e.b));
        Ok((
            SceneGraph {
                view_count,
                edges: out,
            },
            dropped,
        ))
    }

    /// Component label (lowest view id of the component) for every view.
    pub fn components(&self) -> Vec<usize> {
        let mut sets = DisjointSets::new(self.view_count);
        for e in &self.edges {
            sets.union(e.a, e.b);
        }
        (0..self.view_count).map(|v| sets.find(v)).collect()
    }
}

/// Incident edges of `view`, ordered by `(min, max)` id.
pub fn edges_of_view(g: &SceneGraph, view: usize) -> Result<Vec<(usize, usize)>> {
    if view >= g.view_count {
        return Err(Error::UnknownView(view));
    }
    let mut out: Vec<_> = g
        .edges
        .iter()
        .filter(|e| e.a == view || e.b == view)
        .map(|e| ordered(e.a, e.b))
        .collect();
    out.sort();
    Ok(out)
}
