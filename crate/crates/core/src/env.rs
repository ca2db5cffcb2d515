//! Synthetic navigable scenes: weighted connectivity graphs with per-viewpoint
//! directional features, tours of episodes, an exact geodesic oracle, the
//! environment step, and the shortest-path expert policy.
//!
//! Everything here is a pure function of its seed and arguments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ViewpointId = u32;

/// Tolerance for comparing summed edge lengths.
pub const DIST_EPS: f64 = 1e-9;

/// Success radius in meters for navigation metrics.
pub const SUCCESS_RADIUS_M: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid scene parameters: {0}")]
    BadParams(String),
    #[error("scene too small: {0}")]
    SceneTooSmall(String),
    #[error("illegal move from {from} to {to}: not adjacent")]
    IllegalMove { from: ViewpointId, to: ViewpointId },
    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(ViewpointId),
    #[error("serialization: {0}")]
    Serde(String),
}

/// An action in the environment: stop in place or move to an adjacent viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stop,
    MoveTo(ViewpointId),
}

/// Weighted undirected connectivity graph with per-viewpoint directional
/// features. Immutable after generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGraph {
    pub seed: u64,
    pub feat_dim: usize,
    pub view_count: usize,
    /// adjacency[v] = sorted (neighbor, edge length in meters)
    adjacency: Vec<Vec<(ViewpointId, f64)>>,
    /// features[v][k] = unit-norm view vector for direction slot k
    features: Vec<Vec<Vec<f64>>>,
    /// neighbor_views[v] = neighbor id -> direction slot
    neighbor_views: Vec<BTreeMap<ViewpointId, usize>>,
}

impl SceneGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn viewpoints(&self) -> impl Iterator<Item = ViewpointId> {
        (0..self.adjacency.len() as ViewpointId).map(|v| v as ViewpointId)
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        (v as usize) < self.adjacency.len()
    }

    pub fn neighbors(&self, v: ViewpointId) -> &[(ViewpointId, f64)] {
        &self.adjacency[v as usize]
    }

    pub fn edge_len(&self, a: ViewpointId, b: ViewpointId) -> Option<f64> {
        self.adjacency[a as usize]
            .iter()
            .find(|(n, _)| *n == b)
            .map(|(_, w)| *w)
    }

    pub fn views(&self, v: ViewpointId) -> &[Vec<f64>] {
        &self.features[v as usize]
    }

    /// Arithmetic mean of the view vectors at `v`.
    pub fn pooled(&self, v: ViewpointId) -> Vec<f64> {
        let views = &self.features[v as usize];
        let mut out = vec![0.0; self.feat_dim];
        for view in views {
            for (o, &x) in out.iter_mut().zip(view.iter()) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= views.len() as f64;
        }
        out
    }

    /// Build a scene from an explicit edge list, generating features the same
    /// way as [`generate_scene`]. Intended for handcrafted test topologies.
    pub fn from_edges(
        seed: u64,
        n: usize,
        edge_list: &[(ViewpointId, ViewpointId, f64)],
        feat_dim: usize,
        view_count: usize,
    ) -> Result<SceneGraph, EnvError> {
        let mut adjacency: Vec<Vec<(ViewpointId, f64)>> = vec![Vec::new(); n];
        for &(a, b, w) in edge_list {
            if a == b || a as usize >= n || b as usize >= n || w <= 0.0 {
                return Err(EnvError::BadParams(format!("bad edge ({a},{b},{w})")));
            }
            adjacency[a as usize].push((b, w));
            adjacency[b as usize].push((a, w));
        }
        for (v, nbrs) in adjacency.iter_mut().enumerate() {
            nbrs.sort_by_key(|(u, _)| *u);
            if nbrs.is_empty() || nbrs.len() > view_count {
                return Err(EnvError::BadParams(format!(
                    "viewpoint {v} has degree {} (view_count {view_count})",
                    nbrs.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (features, neighbor_views) = gen_features(&adjacency, feat_dim, view_count, &mut rng);
        let scene = SceneGraph {
            seed,
            feat_dim,
            view_count,
            adjacency,
            features,
            neighbor_views,
        };
        if !scene_is_connected(&scene) {
            return Err(EnvError::BadParams("edge list is not connected".into()));
        }
        Ok(scene)
    }

    /// All edges as (a, b, len) with a < b.
    pub fn edges(&self) -> Vec<(ViewpointId, ViewpointId, f64)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.adjacency.iter().enumerate() {
            for &(b, w) in nbrs {
                if (a as ViewpointId) < b {
                    out.push((a as ViewpointId, b, w));
                }
            }
        }
        out
    }
}

/// A single navigation episode within a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub instruction: Vec<f64>,
    pub start: ViewpointId,
    pub goal: ViewpointId,
    pub teacher_path: Vec<ViewpointId>,
}

/// An ordered sequence of episodes over one scene; memory persists across them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tour {
    pub id: u64,
    pub scene_seed: u64,
    pub episodes: Vec<Episode>,
}

/// Panoramic observation at a viewpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub views: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub neighbor_directions: BTreeMap<ViewpointId, usize>,
}

#[derive(Debug, Clone)]
pub struct SceneParams {
    pub n: usize,
    pub avg_degree: f64,
    pub feat_dim: usize,
    pub view_count: usize,
}

#[derive(Debug, Clone)]
pub struct TourParams {
    pub n_episodes: usize,
    /// Minimum teacher-path length in edges.
    pub min_hops: usize,
    /// Minimum geodesic start-goal distance in meters. Keeping this above
    /// the success radius makes SR nontrivial.
    pub min_goal_dist_m: f64,
    /// Stddev of the additive noise on the instruction's path component.
    pub instr_noise: f64,
}

impl Default for TourParams {
    fn default() -> Self {
        TourParams {
            n_episodes: 1,
            min_hops: 2,
            min_goal_dist_m: SUCCESS_RADIUS_M,
            instr_noise: 0.1,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0, "cannot normalize zero vector");
    for x in v.iter_mut() {
        *x /= norm;
    }
}

fn unit_normal_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Procedurally generate a connected scene. Deterministic in `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneGraph, EnvError> {
    let SceneParams {
        n,
        avg_degree,
        feat_dim,
        view_count,
    } = *params;
    if n < 4 {
        return Err(EnvError::BadParams(format!("n = {n}, need n >= 4")));
    }
    if avg_degree < 2.0 {
        return Err(EnvError::BadParams(format!(
            "avg_degree = {avg_degree}, need >= 2"
        )));
    }
    if feat_dim < 4 {
        return Err(EnvError::BadParams(format!(
            "feat_dim = {feat_dim}, need >= 4"
        )));
    }
    // one direction slot per neighbor
    let max_degree = view_count;
    if avg_degree > max_degree as f64 {
        return Err(EnvError::BadParams(format!(
            "avg_degree {avg_degree} exceeds view_count {view_count}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adjacency: Vec<Vec<(ViewpointId, f64)>> = vec![Vec::new(); n];

    let draw_len = |rng: &mut ChaCha8Rng| -> f64 {
        // quantized to millimeters so serialized lengths stay compact
        let mm = rng.random_range(1000u64..10000u64);
        mm as f64 / 1000.0
    };

    // random spanning tree under the degree cap
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in 1..n {
        let candidates: Vec<usize> = order[..i]
            .iter()
            .copied()
            .filter(|&u| adjacency[u].len() < max_degree)
            .collect();
        assert!(!candidates.is_empty(), "tree attachment always possible");
        let u = candidates[rng.random_range(0..candidates.len())];
        let v = order[i];
        let w = draw_len(&mut rng);
        adjacency[u].push((v as ViewpointId, w));
        adjacency[v].push((u as ViewpointId, w));
    }

    // extra edges up to the requested average degree
    let target_edges = ((avg_degree * n as f64) / 2.0).round() as usize;
    let mut current_edges = n - 1;
    let mut attempts = 0usize;
    let max_attempts = 50 * n * n;
    while current_edges < target_edges && attempts < max_attempts {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b
            || adjacency[a].len() >= max_degree
            || adjacency[b].len() >= max_degree
            || adjacency[a].iter().any(|(u, _)| *u as usize == b)
        {
            continue;
        }
        let w = draw_len(&mut rng);
        adjacency[a].push((b as ViewpointId, w));
        adjacency[b].push((a as ViewpointId, w));
        current_edges += 1;
    }

    for nbrs in adjacency.iter_mut() {
        nbrs.sort_by_key(|(u, _)| *u);
    }

    let (features, neighbor_views) = gen_features(&adjacency, feat_dim, view_count, &mut rng);

    let scene = SceneGraph {
        seed,
        feat_dim,
        view_count,
        adjacency,
        features,
        neighbor_views,
    };
    debug_assert!(scene_is_connected(&scene));
    Ok(scene)
}

/// Directional views per viewpoint: each slot that holds a neighbor mixes in
/// that neighbor's base identity vector, so views carry where-they-lead
/// information. Slots with no neighbor are noisy copies of the base.
fn gen_features(
    adjacency: &[Vec<(ViewpointId, f64)>],
    feat_dim: usize,
    view_count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<Vec<f64>>>, Vec<BTreeMap<ViewpointId, usize>>) {
    let n = adjacency.len();
    let bases: Vec<Vec<f64>> = (0..n).map(|_| unit_normal_vec(feat_dim, rng)).collect();
    let mut features = Vec::with_capacity(n);
    let mut neighbor_views = Vec::with_capacity(n);
    for v in 0..n {
        let mut slots: BTreeMap<ViewpointId, usize> = BTreeMap::new();
        for (rank, (u, _)) in adjacency[v].iter().enumerate() {
            slots.insert(*u, rank);
        }
        let mut views = Vec::with_capacity(view_count);
        for k in 0..view_count {
            let noise = unit_normal_vec(feat_dim, rng);
            let neighbor = adjacency[v].get(k).map(|(u, _)| *u as usize);
            let mut view: Vec<f64> = (0..feat_dim)
                .map(|d| match neighbor {
                    Some(u) => 0.4 * bases[v][d] + bases[u][d] + 0.1 * noise[d],
                    None => bases[v][d] + 0.1 * noise[d],
                })
                .collect();
            normalize(&mut view);
            views.push(view);
        }
        features.push(views);
        neighbor_views.push(slots);
    }
    (features, neighbor_views)
}

fn scene_is_connected(scene: &SceneGraph) -> bool {
    let n = scene.node_count();
    let mut seen = vec![false; n];
    let mut stack = vec![0u32];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &(u, _) in scene.neighbors(v) {
            if !seen[u as usize] {
                seen[u as usize] = true;
                count += 1;
                stack.push(u);
            }
        }
    }
    count == n
}

/// Exact shortest path by edge length with a deterministic tie-break: among
/// all shortest paths the lexicographically smallest viewpoint sequence.
pub fn geodesic(scene: &SceneGraph, a: ViewpointId, b: ViewpointId) -> (f64, Vec<ViewpointId>) {
    assert!(scene.contains(a) && scene.contains(b), "viewpoints in scene");
    if a == b {
        return (0.0, vec![a]);
    }
    let dist = dijkstra_from(scene, b);
    let total = dist[a as usize];
    assert!(total.is_finite(), "scene is connected by invariant");
    let mut path = vec![a];
    let mut cur = a;
    while cur != b {
        let remaining = dist[cur as usize];
        let mut next: Option<ViewpointId> = None;
        for &(u, w) in scene.neighbors(cur) {
            if (w + dist[u as usize] - remaining).abs() < DIST_EPS {
                next = Some(match next {
                    Some(best) => best.min(u),
                    None => u,
                });
            }
        }
        cur = next.expect("shortest path step exists");
        path.push(cur);
    }
    (total, path)
}

/// Dijkstra distances from `src` to every viewpoint.
pub fn dijkstra_from(scene: &SceneGraph, src: ViewpointId) -> Vec<f64> {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct Entry(f64, ViewpointId);
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> Ordering {
            // min-heap on distance, then id for determinism
            other
                .0
                .partial_cmp(&self.0)
                .unwrap()
                .then_with(|| other.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }

    let n = scene.node_count();
    let mut dist = vec![f64::INFINITY; n];
    dist[src as usize] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, src));
    while let Some(Entry(d, v)) = heap.pop() {
        if d > dist[v as usize] {
            continue;
        }
        for &(u, w) in scene.neighbors(v) {
            let nd = d + w;
            if nd < dist[u as usize] {
                dist[u as usize] = nd;
                heap.push(Entry(nd, u));
            }
        }
    }
    dist
}

/// Build the observation for a viewpoint.
pub fn observe(scene: &SceneGraph, v: ViewpointId) -> Observation {
    Observation {
        views: scene.views(v).to_vec(),
        pooled: scene.pooled(v),
        neighbor_directions: scene.neighbor_views[v as usize].clone(),
    }
}

/// Execute one environment step. Returns the observation at the new
/// viewpoint, the new viewpoint, and gamma = geodesic distance to the goal.
pub fn env_step(
    scene: &SceneGraph,
    current: ViewpointId,
    action: Action,
    goal: ViewpointId,
) -> Result<(Observation, ViewpointId, f64), EnvError> {
    if !scene.contains(current) {
        return Err(EnvError::UnknownViewpoint(current));
    }
    let new_vp = match action {
        Action::Stop => current,
        Action::MoveTo(v) => {
            if scene.edge_len(current, v).is_none() {
                return Err(EnvError::IllegalMove {
                    from: current,
                    to: v,
                });
            }
            v
        }
    };
    let gamma = geodesic(scene, new_vp, goal).0;
    Ok((observe(scene, new_vp), new_vp, gamma))
}

/// Expert policy: at the goal, stop; otherwise move to a neighbor lying on
/// some shortest path to the goal, sampled uniformly among all of them.
pub fn expert_action(
    scene: &SceneGraph,
    current: ViewpointId,
    goal: ViewpointId,
    rng: &mut impl Rng,
) -> Action {
    if current == goal {
        return Action::Stop;
    }
    let dist = dijkstra_from(scene, goal);
    let remaining = dist[current as usize];
    let candidates: Vec<ViewpointId> = scene
        .neighbors(current)
        .iter()
        .filter(|(u, w)| (w + dist[*u as usize] - remaining).abs() < DIST_EPS)
        .map(|(u, _)| *u)
        .collect();
    assert!(!candidates.is_empty(), "connected scene always has a next hop");
    Action::MoveTo(candidates[rng.random_range(0..candidates.len())])
}

/// Generate a tour of episodes with distinct (start, goal) pairs.
/// Deterministic in `seed`.
pub fn generate_tour(
    scene: &SceneGraph,
    params: &TourParams,
    seed: u64,
) -> Result<Tour, EnvError> {
    if params.n_episodes < 1 {
        return Err(EnvError::BadParams("n_episodes must be >= 1".into()));
    }
    let n = scene.node_count();
    // domain-separate tour RNG from scene RNG sharing the same seed value
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_DEAD_BEEF);

    // enumerate admissible ordered pairs, then shuffle deterministically
    let mut pairs: Vec<(ViewpointId, ViewpointId)> = Vec::new();
    for s in 0..n as ViewpointId {
        let dist = dijkstra_from(scene, s);
        for g in 0..n as ViewpointId {
            if s == g || dist[g as usize] <= params.min_goal_dist_m {
                continue;
            }
            pairs.push((s, g));
        }
    }
    // hop filter via teacher paths is costlier, apply after shuffle lazily
    pairs.shuffle(&mut rng);

    let mut episodes = Vec::with_capacity(params.n_episodes);
    for (start, goal) in pairs {
        if episodes.len() == params.n_episodes {
            break;
        }
        let (dist_m, teacher_path) = geodesic(scene, start, goal);
        if teacher_path.len() < params.min_hops + 1 {
            continue;
        }
        debug_assert!(dist_m > params.min_goal_dist_m);
        // instruction = goal pooled feature ++ noisy mean of path pooled features
        let goal_feat = scene.pooled(goal);
        let mut path_feat = vec![0.0; scene.feat_dim];
        for &v in &teacher_path {
            let p = scene.pooled(v);
            for (acc, x) in path_feat.iter_mut().zip(p.iter()) {
                *acc += x;
            }
        }
        for x in path_feat.iter_mut() {
            *x /= teacher_path.len() as f64;
        }
        for x in path_feat.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x += params.instr_noise * noise;
        }
        let mut instruction = goal_feat;
        instruction.extend(path_feat);
        episodes.push(Episode {
            instruction,
            start,
            goal,
            teacher_path,
        });
    }
    if episodes.len() < params.n_episodes {
        return Err(EnvError::SceneTooSmall(format!(
            "only {} admissible episodes, requested {}",
            episodes.len(),
            params.n_episodes
        )));
    }
    Ok(Tour {
        id: seed,
        scene_seed: scene.seed,
        episodes,
    })
}

/// Combined scene + tours document for JSON serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub version: u32,
    pub scene: SceneGraph,
    pub tours: Vec<Tour>,
}

pub const SCENE_DOC_VERSION: u32 = 1;

impl SceneDoc {
    pub fn new(scene: SceneGraph, tours: Vec<Tour>) -> Self {
        SceneDoc {
            version: SCENE_DOC_VERSION,
            scene,
            tours,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene doc serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        serde_json::from_str(s).map_err(|e| EnvError::Serde(e.to_string()))
    }
}
