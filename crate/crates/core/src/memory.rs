//! Hybrid viewpoint-level memory: a persistent graph accumulated across the
//! episodes of a tour, an observation bank of pooled features, a history
//! bank of inferred states with their imagined trajectories, and the two
//! retrieval procedures that expand the episodic graph.
//!
//! Observation retrieval walks hop-distance rings around the current
//! viewpoint, scores ring members against the imagined state for that step,
//! applies percentile filtering with a per-step decay, caps the survivor
//! count, and merges the shortest paths to all survivors. History retrieval
//! matches the current imagined trajectory against stored trajectories
//! step-by-step under a decaying threshold, ranks patterns by match length
//! then minimum matched score, and replays the subsequent viewpoints of the
//! best patterns into the episodic graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ViewpointId;
use crate::tensor::{cosine_sim, Mat, ParamStore, TensorError};
use crate::world::{ImaginedTrajectory, LatentState, WorldError, WorldModel};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("viewpoint {0} is not in the persistent graph")]
    UnknownViewpoint(ViewpointId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("snapshot version mismatch: found {0}")]
    VersionMismatch(u32),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

/// Retrieval hyperparameters. Defaults follow the reference study: filter
/// rate 0.2 with width 12 for observations, threshold 0.2 with 10 patterns
/// and decay 0.8 for histories. The observation decay is set symmetric to
/// the history decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub width: usize,
    pub rho_o: f64,
    pub gamma_o: f64,
    pub theta_h: f64,
    pub gamma_h: f64,
    pub max_patterns: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            width: 12,
            rho_o: 0.2,
            gamma_o: 0.8,
            theta_h: 0.2,
            gamma_h: 0.8,
            max_patterns: 10,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let ok = self.width >= 1
            && self.max_patterns >= 1
            && (0.0..=1.0).contains(&self.rho_o)
            && self.gamma_o > 0.0
            && self.gamma_o <= 1.0
            && (0.0..=1.0).contains(&self.theta_h)
            && self.gamma_h > 0.0
            && self.gamma_h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(MemoryError::Corrupt(format!(
                "invalid retrieval config {self:?}"
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// persistent graph
// ---------------------------------------------------------------------------

/// Union of all viewpoints and edges observed so far in a tour. Grows
/// monotonically; always a subgraph of the true scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistentGraph {
    adjacency: BTreeMap<ViewpointId, BTreeMap<ViewpointId, f64>>,
}

impl PersistentGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_viewpoint(&mut self, v: ViewpointId) {
        self.adjacency.entry(v).or_default();
    }

    pub fn add_edge(&mut self, a: ViewpointId, b: ViewpointId, len: f64) {
        assert!(a != b && len > 0.0, "edges join distinct viewpoints");
        self.adjacency.entry(a).or_default().insert(b, len);
        self.adjacency.entry(b).or_default().insert(a, len);
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        self.adjacency.contains_key(&v)
    }

    pub fn viewpoints(&self) -> impl Iterator<Item = ViewpointId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn viewpoint_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(|m| m.len()).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: ViewpointId) -> impl Iterator<Item = (ViewpointId, f64)> + '_ {
        self.adjacency
            .get(&v)
            .into_iter()
            .flat_map(|m| m.iter().map(|(&u, &w)| (u, w)))
    }

    pub fn has_edge(&self, a: ViewpointId, b: ViewpointId) -> bool {
        self.adjacency
            .get(&a)
            .is_some_and(|m| m.contains_key(&b))
    }

    pub fn edges(&self) -> Vec<(ViewpointId, ViewpointId, f64)> {
        let mut out = Vec::new();
        for (&a, nbrs) in &self.adjacency {
            for (&b, &w) in nbrs {
                if a < b {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    /// Exact-hop-distance rings around `v`, for hop counts 1..=max_hops.
    /// Ring members are sorted ascending.
    pub fn hop_rings(&self, v: ViewpointId, max_hops: usize) -> Vec<Vec<ViewpointId>> {
        let mut rings = vec![Vec::new(); max_hops];
        let mut dist: BTreeMap<ViewpointId, usize> = BTreeMap::new();
        dist.insert(v, 0);
        let mut queue = VecDeque::new();
        queue.push_back(v);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if d == max_hops {
                continue;
            }
            for (u, _) in self.neighbors(cur) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                    e.insert(d + 1);
                    rings[d].push(u);
                    queue.push_back(u);
                }
            }
        }
        for ring in rings.iter_mut() {
            ring.sort_unstable();
        }
        rings
    }

    /// Weighted shortest path with lexicographic smallest-sequence tie-break,
    /// or None when disconnected.
    pub fn shortest_path(&self, a: ViewpointId, b: ViewpointId) -> Option<Vec<ViewpointId>> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        if a == b {
            return Some(vec![a]);
        }
        let dist = self.dijkstra(b);
        let total = *dist.get(&a)?;
        if !total.is_finite() {
            return None;
        }
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            let remaining = dist[&cur];
            let mut next: Option<ViewpointId> = None;
            for (u, w) in self.neighbors(cur) {
                if let Some(&du) = dist.get(&u) {
                    if (w + du - remaining).abs() < crate::env::DIST_EPS {
                        next = Some(match next {
                            Some(best) => best.min(u),
                            None => u,
                        });
                    }
                }
            }
            cur = next?;
            path.push(cur);
        }
        Some(path)
    }

    fn dijkstra(&self, src: ViewpointId) -> BTreeMap<ViewpointId, f64> {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;
        #[derive(PartialEq)]
        struct Entry(f64, ViewpointId);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
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
        let mut dist: BTreeMap<ViewpointId, f64> = BTreeMap::new();
        dist.insert(src, 0.0);
        let mut heap = BinaryHeap::new();
        heap.push(Entry(0.0, src));
        while let Some(Entry(d, v)) = heap.pop() {
            if d > dist[&v] {
                continue;
            }
            for (u, w) in self.neighbors(v) {
                let nd = d + w;
                if dist.get(&u).map(|&x| nd < x).unwrap_or(true) {
                    dist.insert(u, nd);
                    heap.push(Entry(nd, u));
                }
            }
        }
        dist
    }
}

// ---------------------------------------------------------------------------
// episodic graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeCategory {
    Current,
    Visited,
    Frontier,
    Retrieved,
}

/// A historical state replayed onto a viewpoint, with its match score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryAttachment {
    pub state: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodicNode {
    pub category: NodeCategory,
    feature_sum: Vec<f64>,
    feature_count: usize,
    pub attachments: Vec<HistoryAttachment>,
}

impl EpisodicNode {
    fn new(category: NodeCategory, feat_dim: usize) -> Self {
        EpisodicNode {
            category,
            feature_sum: vec![0.0; feat_dim],
            feature_count: 0,
            attachments: Vec::new(),
        }
    }

    pub fn feature(&self) -> Vec<f64> {
        if self.feature_count == 0 {
            return vec![0.0; self.feature_sum.len()];
        }
        self.feature_sum
            .iter()
            .map(|v| v / self.feature_count as f64)
            .collect()
    }

    pub fn feature_known(&self) -> bool {
        self.feature_count > 0
    }

    fn fold_feature(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.feature_sum.len());
        for (s, &v) in self.feature_sum.iter_mut().zip(x.iter()) {
            *s += v;
        }
        self.feature_count += 1;
    }

    fn set_feature(&mut self, x: &[f64]) {
        self.feature_sum = x.to_vec();
        self.feature_count = 1;
    }
}

/// Per-episode topological map with visited / frontier / current / retrieved
/// node categories, per-node features and history attachments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodicGraph {
    feat_dim: usize,
    nodes: BTreeMap<ViewpointId, EpisodicNode>,
    edges: BTreeMap<ViewpointId, BTreeSet<ViewpointId>>,
    current: Option<ViewpointId>,
}

impl EpisodicGraph {
    pub fn new(feat_dim: usize) -> Self {
        EpisodicGraph {
            feat_dim,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            current: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        self.nodes.contains_key(&v)
    }

    pub fn node(&self, v: ViewpointId) -> Option<&EpisodicNode> {
        self.nodes.get(&v)
    }

    pub fn node_ids(&self) -> Vec<ViewpointId> {
        self.nodes.keys().copied().collect()
    }

    pub fn current(&self) -> Option<ViewpointId> {
        self.current
    }

    pub fn edges_of(&self, v: ViewpointId) -> impl Iterator<Item = ViewpointId> + '_ {
        self.edges.get(&v).into_iter().flatten().copied()
    }

    pub fn edge_pairs(&self) -> Vec<(ViewpointId, ViewpointId)> {
        let mut out = Vec::new();
        for (&a, nbrs) in &self.edges {
            for &b in nbrs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn add_edge(&mut self, a: ViewpointId, b: ViewpointId) {
        assert!(self.nodes.contains_key(&a) && self.nodes.contains_key(&b));
        if a == b {
            return;
        }
        self.edges.entry(a).or_default().insert(b);
        self.edges.entry(b).or_default().insert(a);
    }

    /// Mark `v` as the current viewpoint, folding its pooled feature into the
    /// node's running average. The previous current node becomes visited.
    pub fn map_visit(&mut self, v: ViewpointId, pooled: &[f64]) {
        if let Some(prev) = self.current.take() {
            if prev != v {
                self.nodes.get_mut(&prev).expect("current exists").category =
                    NodeCategory::Visited;
            }
        }
        let node = self
            .nodes
            .entry(v)
            .or_insert_with(|| EpisodicNode::new(NodeCategory::Current, self.feat_dim));
        node.category = NodeCategory::Current;
        node.fold_feature(pooled);
        self.current = Some(v);
    }

    /// Record an observable neighbor. New nodes become frontiers with the
    /// directional view feature; existing frontier nodes average it in.
    pub fn map_frontier(&mut self, v: ViewpointId, view_feat: &[f64]) {
        match self.nodes.get_mut(&v) {
            None => {
                let mut node = EpisodicNode::new(NodeCategory::Frontier, self.feat_dim);
                node.fold_feature(view_feat);
                self.nodes.insert(v, node);
            }
            Some(node) if node.category == NodeCategory::Frontier => {
                node.fold_feature(view_feat);
            }
            Some(_) => {}
        }
    }

    /// Merge a retrieved viewpoint. Existing nodes keep their category and
    /// feature; new nodes are categorized as retrieved and take the bank
    /// feature when one is supplied.
    pub fn merge_retrieved(&mut self, v: ViewpointId, feature: Option<&[f64]>) {
        let node = self
            .nodes
            .entry(v)
            .or_insert_with(|| EpisodicNode::new(NodeCategory::Retrieved, self.feat_dim));
        if !node.feature_known() {
            if let Some(x) = feature {
                node.set_feature(x);
            }
        }
    }

    pub fn attach_history(&mut self, v: ViewpointId, state: Vec<f64>, score: f64) {
        let node = self.nodes.get_mut(&v).expect("attach to existing node");
        node.attachments.push(HistoryAttachment { state, score });
    }

    /// Pairwise hop distances over the given node order. Unreachable pairs
    /// get the node count as a finite sentinel.
    pub fn hop_matrix(&self, order: &[ViewpointId]) -> Mat {
        let n = order.len();
        let sentinel = self.nodes.len().max(1) as f64;
        let index: BTreeMap<ViewpointId, usize> =
            order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut m = Mat::from_vec(n, n, vec![sentinel; n * n]);
        for (row, &src) in order.iter().enumerate() {
            let mut dist: BTreeMap<ViewpointId, usize> = BTreeMap::new();
            dist.insert(src, 0);
            let mut queue = VecDeque::new();
            queue.push_back(src);
            while let Some(cur) = queue.pop_front() {
                let d = dist[&cur];
                for u in self.edges_of(cur) {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                        e.insert(d + 1);
                        queue.push_back(u);
                    }
                }
            }
            for (v, d) in dist {
                if let Some(&col) = index.get(&v) {
                    *m.at_mut(row, col) = d as f64;
                }
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// banks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObsEntry {
    sum: Vec<f64>,
    count: usize,
}

/// Viewpoint-anchored pooled features, running-averaged over revisits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationBank {
    entries: BTreeMap<ViewpointId, ObsEntry>,
}

impl ObservationBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        graph: &PersistentGraph,
        v: ViewpointId,
        x: &[f64],
    ) -> Result<(), MemoryError> {
        if !graph.contains(v) {
            return Err(MemoryError::UnknownViewpoint(v));
        }
        match self.entries.get_mut(&v) {
            Some(e) => {
                assert_eq!(e.sum.len(), x.len());
                for (s, &val) in e.sum.iter_mut().zip(x.iter()) {
                    *s += val;
                }
                e.count += 1;
            }
            None => {
                self.entries.insert(
                    v,
                    ObsEntry {
                        sum: x.to_vec(),
                        count: 1,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn get(&self, v: ViewpointId) -> Option<Vec<f64>> {
        self.entries
            .get(&v)
            .map(|e| e.sum.iter().map(|s| s / e.count as f64).collect())
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        self.entries.contains_key(&v)
    }

    pub fn visit_count(&self, v: ViewpointId) -> usize {
        self.entries.get(&v).map(|e| e.count).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn viewpoints(&self) -> impl Iterator<Item = ViewpointId> + '_ {
        self.entries.keys().copied()
    }
}

/// One step of a recorded episode: where the agent was, its inferred state,
/// and the imagined trajectory generated there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogEntry {
    pub viewpoint: ViewpointId,
    pub state: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
}

/// A record anchored at a viewpoint, referencing the episode log so the
/// subsequently visited viewpoints can be traced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub episode_id: u64,
    pub step: usize,
}

/// Viewpoint-anchored navigation histories: inferred states plus imagined
/// trajectories, with per-episode visit logs for tracing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryBank {
    records: BTreeMap<ViewpointId, Vec<RecordRef>>,
    episodes: BTreeMap<u64, Vec<EpisodeLogEntry>>,
}

impl HistoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        graph: &PersistentGraph,
        v: ViewpointId,
        state: Vec<f64>,
        trajectory: Vec<Vec<f64>>,
        episode_id: u64,
    ) -> Result<(), MemoryError> {
        if !graph.contains(v) {
            return Err(MemoryError::UnknownViewpoint(v));
        }
        let log = self.episodes.entry(episode_id).or_default();
        let step = log.len();
        log.push(EpisodeLogEntry {
            viewpoint: v,
            state,
            trajectory,
        });
        self.records
            .entry(v)
            .or_default()
            .push(RecordRef { episode_id, step });
        Ok(())
    }

    pub fn records_at(&self, v: ViewpointId) -> Vec<(RecordRef, &EpisodeLogEntry)> {
        self.records
            .get(&v)
            .into_iter()
            .flatten()
            .map(|r| (*r, &self.episodes[&r.episode_id][r.step]))
            .collect()
    }

    /// Up to `len` log entries visited after `step` in the given episode.
    pub fn trace(&self, r: RecordRef, len: usize) -> &[EpisodeLogEntry] {
        let log = &self.episodes[&r.episode_id];
        let start = (r.step + 1).min(log.len());
        let end = (r.step + 1 + len).min(log.len());
        &log[start..end]
    }

    /// Every viewpoint visited in an episode, in visit order.
    pub fn episode_viewpoints(&self, episode_id: u64) -> Vec<ViewpointId> {
        self.episodes
            .get(&episode_id)
            .into_iter()
            .flatten()
            .map(|e| e.viewpoint)
            .collect()
    }

    pub fn record_count_at(&self, v: ViewpointId) -> usize {
        self.records.get(&v).map(|r| r.len()).unwrap_or(0)
    }

    pub fn total_records(&self) -> usize {
        self.records.values().map(|v| v.len()).sum()
    }

    pub fn viewpoints(&self) -> impl Iterator<Item = ViewpointId> + '_ {
        self.records.keys().copied()
    }
}

// ---------------------------------------------------------------------------
// compatibility scores
// ---------------------------------------------------------------------------

/// Affine map of state-observation cosine similarity into [0, 1].
pub fn score_obs(
    wm: &WorldModel,
    store: &ParamStore,
    state: &LatentState,
    x: &[f64],
) -> Result<f64, MemoryError> {
    let se = wm.embed_state_values(store, state);
    let oe = wm.embed_obs_values(store, x)?;
    Ok(0.5 * (cosine_sim(&se, &oe)? + 1.0))
}

/// Affine map of state-state cosine similarity into [0, 1]; both sides pass
/// through the state embedding.
pub fn score_hist(
    wm: &WorldModel,
    store: &ParamStore,
    a: &LatentState,
    b: &LatentState,
) -> Result<f64, MemoryError> {
    let ea = wm.embed_state_values(store, a);
    let eb = wm.embed_state_values(store, b);
    Ok(0.5 * (cosine_sim(&ea, &eb)? + 1.0))
}

fn score_from_embeds(a: &[f64], b: &[f64]) -> Result<f64, MemoryError> {
    Ok(0.5 * (cosine_sim(a, b)? + 1.0))
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

/// What observation retrieval did, for metrics and instrumentation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObsRetrievalOutcome {
    /// All viewpoints on merged shortest paths (the retrieved set R).
    pub retrieved: BTreeSet<ViewpointId>,
    /// Survivor targets per imagination step, before path expansion.
    pub per_step_survivors: Vec<Vec<ViewpointId>>,
    /// Viewpoints skipped at merge time because the bank had no feature.
    pub skipped_missing_feature: usize,
}

/// One replayed history pattern, for metrics and the history branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievedPattern {
    pub record: RecordRef,
    /// Viewpoints of the replayed window (the traced subsequent visits).
    pub window: Vec<ViewpointId>,
    /// Every viewpoint of the originating episode, in visit order.
    pub original: Vec<ViewpointId>,
    /// Matched compatibility scores c_1..c_|C|.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HistRetrievalOutcome {
    pub patterns: Vec<RetrievedPattern>,
    pub skipped_missing_feature: usize,
}

/// Merge one retrieved viewpoint into the episodic graph: bank feature,
/// persistent edges, and the persistent neighbors as frontier-like context
/// nodes. Returns false (and counts a skip) when the bank has no feature.
pub(crate) fn merge_retrieved_viewpoint(
    episodic: &mut EpisodicGraph,
    persistent: &PersistentGraph,
    obs_bank: &ObservationBank,
    v: ViewpointId,
    skipped: &mut usize,
) -> bool {
    let Some(feature) = obs_bank.get(v) else {
        *skipped += 1;
        return false;
    };
    episodic.merge_retrieved(v, Some(&feature));
    for (u, _) in persistent.neighbors(v) {
        episodic.merge_retrieved(u, obs_bank.get(u).as_deref());
        episodic.add_edge(v, u);
    }
    true
}

/// Environmental observation retrieval: expand the episodic graph with the
/// shortest paths to the ring viewpoints most compatible with the imagined
/// states, one ring per imagination step.
pub fn retrieve_observations(
    cfg: &RetrievalConfig,
    wm: &WorldModel,
    store: &ParamStore,
    persistent: &PersistentGraph,
    v_t: ViewpointId,
    tau: &ImaginedTrajectory,
    obs_bank: &ObservationBank,
    episodic: &mut EpisodicGraph,
) -> Result<ObsRetrievalOutcome, MemoryError> {
    cfg.validate()?;
    if !persistent.contains(v_t) {
        return Err(MemoryError::UnknownViewpoint(v_t));
    }
    let mut outcome = ObsRetrievalOutcome::default();
    if tau.horizon() == 0 || obs_bank.is_empty() {
        return Ok(outcome);
    }

    let rings = persistent.hop_rings(v_t, tau.horizon());
    let mut retrieved: BTreeSet<ViewpointId> = BTreeSet::new();
    for (idx, state) in tau.states.iter().enumerate() {
        let ring = &rings[idx];
        let state_embed = wm.embed_state_values(store, state);
        // score only ring members with a stored feature
        let mut scored: Vec<(f64, ViewpointId)> = Vec::new();
        for &v in ring {
            if let Some(x) = obs_bank.get(v) {
                let oe = wm.embed_obs_values(store, &x)?;
                scored.push((score_from_embeds(&state_embed, &oe)?, v));
            }
        }
        if scored.is_empty() {
            outcome.per_step_survivors.push(Vec::new());
            continue;
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let fraction = 1.0 - cfg.rho_o * cfg.gamma_o.powi(idx as i32);
        let keep = ((fraction * scored.len() as f64).ceil() as usize).max(1);
        scored.truncate(keep.min(cfg.width));
        let survivors: Vec<ViewpointId> = scored.iter().map(|&(_, v)| v).collect();
        for &target in &survivors {
            let path = persistent
                .shortest_path(v_t, target)
                .expect("ring members are reachable");
            retrieved.extend(path);
        }
        outcome.per_step_survivors.push(survivors);
    }

    for &v in &retrieved {
        merge_retrieved_viewpoint(
            episodic,
            persistent,
            obs_bank,
            v,
            &mut outcome.skipped_missing_feature,
        );
    }
    outcome.retrieved = retrieved;
    Ok(outcome)
}

/// Navigation history retrieval: match stored imagined trajectories at the
/// current viewpoint against the fresh imagination, rank by match length
/// then minimum matched score, and replay the best patterns' subsequent
/// viewpoints (with their states and scores) into the episodic graph.
pub fn retrieve_histories(
    cfg: &RetrievalConfig,
    wm: &WorldModel,
    store: &ParamStore,
    persistent: &PersistentGraph,
    v_t: ViewpointId,
    tau: &ImaginedTrajectory,
    hist_bank: &HistoryBank,
    obs_bank: &ObservationBank,
    episodic: &mut EpisodicGraph,
) -> Result<HistRetrievalOutcome, MemoryError> {
    cfg.validate()?;
    if !persistent.contains(v_t) {
        return Err(MemoryError::UnknownViewpoint(v_t));
    }
    let mut outcome = HistRetrievalOutcome::default();
    let records = hist_bank.records_at(v_t);
    if records.is_empty() || tau.horizon() == 0 {
        return Ok(outcome);
    }

    let query_embeds: Vec<Vec<f64>> = tau
        .states
        .iter()
        .map(|s| wm.embed_state_values(store, s))
        .collect();

    struct Candidate {
        record: RecordRef,
        scores: Vec<f64>,
    }
    let mut candidates = Vec::with_capacity(records.len());
    for (record, entry) in records {
        let limit = tau.horizon().min(entry.trajectory.len());
        let mut scores = Vec::new();
        for i in 0..limit {
            // stored trajectories hold full states; embed through psi_s
            let stored_embed = wm.embed_full_values(store, &entry.trajectory[i]);
            let c = score_from_embeds(&query_embeds[i], &stored_embed)?;
            if c < cfg.theta_h * cfg.gamma_h.powi(i as i32) {
                break;
            }
            scores.push(c);
        }
        candidates.push(Candidate { record, scores });
    }

    candidates.sort_by(|a, b| {
        let min_a = a.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let min_b = b.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        b.scores
            .len()
            .cmp(&a.scores.len())
            .then_with(|| min_b.partial_cmp(&min_a).unwrap())
            .then_with(|| a.record.episode_id.cmp(&b.record.episode_id))
            .then_with(|| a.record.step.cmp(&b.record.step))
    });
    candidates.truncate(cfg.max_patterns);

    for cand in candidates {
        let entries = hist_bank.trace(cand.record, cand.scores.len());
        let mut window = Vec::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            let merged = merge_retrieved_viewpoint(
                episodic,
                persistent,
                obs_bank,
                entry.viewpoint,
                &mut outcome.skipped_missing_feature,
            );
            if merged || episodic.contains(entry.viewpoint) {
                episodic.attach_history(entry.viewpoint, entry.state.clone(), cand.scores[i]);
            }
            window.push(entry.viewpoint);
        }
        outcome.patterns.push(RetrievedPattern {
            record: cand.record,
            window,
            original: hist_bank.episode_viewpoints(cand.record.episode_id),
            scores: cand.scores,
        });
    }
    Ok(outcome)
}


// ---------------------------------------------------------------------------
// snapshots
// ---------------------------------------------------------------------------

const HVM_MAGIC: &[u8; 8] = b"MEMOIRHV";
const HVM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HvmManifest {
    version: u32,
    feat_dim: usize,
    state_dim: usize,
    graph_nodes: Vec<ViewpointId>,
    graph_edges: Vec<(ViewpointId, ViewpointId, f64)>,
    obs: Vec<(ViewpointId, usize)>,
    episodes: Vec<(u64, Vec<(ViewpointId, usize)>)>,
    records: Vec<(ViewpointId, Vec<RecordRef>)>,
}

/// Serialize the banks and persistent graph into a versioned binary
/// container: JSON manifest plus raw little-endian f64 payloads.
pub fn snapshot(
    obs: &ObservationBank,
    hist: &HistoryBank,
    graph: &PersistentGraph,
) -> Vec<u8> {
    let feat_dim = obs
        .entries
        .values()
        .next()
        .map(|e| e.sum.len())
        .unwrap_or(0);
    let state_dim = hist
        .episodes
        .values()
        .flat_map(|log| log.iter())
        .next()
        .map(|e| e.state.len())
        .unwrap_or(0);
    let manifest = HvmManifest {
        version: HVM_VERSION,
        feat_dim,
        state_dim,
        graph_nodes: graph.viewpoints().collect(),
        graph_edges: graph.edges(),
        obs: obs.entries.iter().map(|(&v, e)| (v, e.count)).collect(),
        episodes: hist
            .episodes
            .iter()
            .map(|(&id, log)| {
                (
                    id,
                    log.iter()
                        .map(|e| (e.viewpoint, e.trajectory.len()))
                        .collect(),
                )
            })
            .collect(),
        records: hist
            .records
            .iter()
            .map(|(&v, refs)| (v, refs.clone()))
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(HVM_MAGIC);
    out.extend_from_slice(&HVM_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    let push_f64s = |xs: &[f64], out: &mut Vec<u8>| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for entry in obs.entries.values() {
        push_f64s(&entry.sum, &mut out);
    }
    for log in hist.episodes.values() {
        for step in log {
            push_f64s(&step.state, &mut out);
            for imagined in &step.trajectory {
                push_f64s(imagined, &mut out);
            }
        }
    }
    out
}

/// Inverse of [`snapshot`]. Validates magic, version, and payload size.
pub fn restore(
    bytes: &[u8],
) -> Result<(ObservationBank, HistoryBank, PersistentGraph), MemoryError> {
    if bytes.len() < 20 || &bytes[..8] != HVM_MAGIC {
        return Err(MemoryError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != HVM_VERSION {
        return Err(MemoryError::VersionMismatch(version));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + mlen {
        return Err(MemoryError::Corrupt("truncated manifest".into()));
    }
    let manifest: HvmManifest = serde_json::from_slice(&bytes[20..20 + mlen])
        .map_err(|e| MemoryError::Corrupt(format!("bad manifest: {e}")))?;
    let payload = &bytes[20 + mlen..];
    let obs_f64s: usize = manifest.obs.len() * manifest.feat_dim;
    let hist_f64s: usize = manifest
        .episodes
        .iter()
        .flat_map(|(_, steps)| steps.iter())
        .map(|&(_, traj_len)| manifest.state_dim * (1 + traj_len))
        .sum();
    if payload.len() != (obs_f64s + hist_f64s) * 8 {
        return Err(MemoryError::Corrupt(format!(
            "payload length {} does not match manifest",
            payload.len()
        )));
    }

    let mut graph = PersistentGraph::new();
    for v in &manifest.graph_nodes {
        graph.add_viewpoint(*v);
    }
    for &(a, b, len) in &manifest.graph_edges {
        graph.add_edge(a, b, len);
    }

    let mut off = 0usize;
    let read = |n: usize, off: &mut usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(payload[*off..*off + 8].try_into().unwrap()));
            *off += 8;
        }
        out
    };

    let mut obs = ObservationBank::new();
    for &(v, count) in &manifest.obs {
        let sum = read(manifest.feat_dim, &mut off);
        obs.entries.insert(v, ObsEntry { sum, count });
    }

    let mut hist = HistoryBank::new();
    for (id, steps) in &manifest.episodes {
        let mut log = Vec::with_capacity(steps.len());
        for &(vp, traj_len) in steps {
            let state = read(manifest.state_dim, &mut off);
            let trajectory = (0..traj_len)
                .map(|_| read(manifest.state_dim, &mut off))
                .collect();
            log.push(EpisodeLogEntry {
                viewpoint: vp,
                state,
                trajectory,
            });
        }
        hist.episodes.insert(*id, log);
    }
    for (v, refs) in manifest.records {
        for r in &refs {
            let valid = hist
                .episodes
                .get(&r.episode_id)
                .is_some_and(|log| r.step < log.len());
            if !valid {
                return Err(MemoryError::Corrupt(format!(
                    "record {r:?} at viewpoint {v} points outside its episode log"
                )));
            }
        }
        hist.records.insert(v, refs);
    }
    Ok((obs, hist, graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DiagGaussian;
    use crate::world::WorldModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// World model sized so psi_s and psi_o can be set to the identity:
    /// state_dim == feat_dim == embed_dim == 4.
    fn identity_wm() -> (WorldModel, ParamStore) {
        let cfg = WorldModelConfig {
            h_dim: 2,
            z_dim: 2,
            feat_dim: 4,
            instr_dim: 8,
            embed_dim: 4,
            max_horizon: 5,
            epsilon: 3.0,
            zeta: 0.1,
        };
        let wm = WorldModel::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        wm.init_params(&mut store, &mut rng);
        let eye = Mat::from_vec(4, 4, {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            d
        });
        *store.get_mut("wm.psi_s.w").unwrap() = eye.clone();
        *store.get_mut("wm.psi_o.w").unwrap() = eye;
        (wm, store)
    }

    fn state_with_full(full: [f64; 4]) -> LatentState {
        LatentState::new(
            vec![full[0], full[1]],
            DiagGaussian::standard(2),
            vec![full[2], full[3]],
        )
    }

    fn rand_state(rng: &mut ChaCha8Rng) -> LatentState {
        LatentState::new(
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            DiagGaussian::standard(2),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        )
    }

    /// Path graph 0-1-2-3-4 with unit lengths.
    fn path_graph() -> PersistentGraph {
        let mut g = PersistentGraph::new();
        for v in 0..5 {
            g.add_viewpoint(v);
        }
        for v in 0..4u32 {
            g.add_edge(v, v + 1, 1.0);
        }
        g
    }

    #[test]
    fn score_obs_basic_values() {
        let (wm, store) = identity_wm();
        let state = state_with_full([0.5, -0.5, 0.25, 1.0]);
        let x = state.full();
        let s = score_obs(&wm, &store, &state, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "identical embeddings: {s}");
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = score_obs(&wm, &store, &state, &neg).unwrap();
        assert!(s.abs() < 1e-12, "antipodal embeddings: {s}");
        let ortho = state_with_full([1.0, 0.0, 0.0, 0.0]);
        let e2 = vec![0.0, 1.0, 0.0, 0.0];
        let s = score_obs(&wm, &store, &ortho, &e2).unwrap();
        assert!((s - 0.5).abs() < 1e-12, "orthogonal embeddings: {s}");
    }

    #[test]
    fn scores_match_direct_recomputation_and_stay_in_range() {
        let (wm, store) = identity_wm();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = rand_state(&mut rng);
            let b = rand_state(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let so = score_obs(&wm, &store, &a, &x).unwrap();
            let sh = score_hist(&wm, &store, &a, &b).unwrap();
            assert!((0.0..=1.0).contains(&so));
            assert!((0.0..=1.0).contains(&sh));
            let ea = wm.embed_state_values(&store, &a);
            let eb = wm.embed_state_values(&store, &b);
            let ox = wm.embed_obs_values(&store, &x).unwrap();
            let direct = |u: &[f64], v: &[f64]| {
                let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                0.5 * (dot / (nu * nv) + 1.0)
            };
            assert!((so - direct(&ea, &ox)).abs() < 1e-12);
            assert!((sh - direct(&ea, &eb)).abs() < 1e-12);
        }
        // identical states score exactly 1
        let s = rand_state(&mut rng);
        assert!((score_hist(&wm, &store, &s, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieve_observations_empty_bank_is_noop() {
        let (wm, store) = identity_wm();
        let g = path_graph();
        let bank = ObservationBank::new();
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(2, &[0.0; 4]);
        let tau = ImaginedTrajectory {
            states: vec![state_with_full([1.0, 0.0, 0.0, 0.0])],
            predicted_rewards: vec![10.0],
        };
        let before = episodic.node_ids();
        let out = retrieve_observations(
            &RetrievalConfig::default(),
            &wm,
            &store,
            &g,
            2,
            &tau,
            &bank,
            &mut episodic,
        )
        .unwrap();
        assert!(out.retrieved.is_empty());
        assert_eq!(episodic.node_ids(), before);
    }

    #[test]
    fn retrieve_observations_hand_traced_path_graph() {
        // Rings around v_t = 2 on the path graph: {1,3} then {0,4}. With
        // width 1 and embeddings steering step 1 to 3 and step 2 to 4, the
        // retrieved set is the current viewpoint plus the two viewpoints
        // toward the far endpoint.
        let (wm, store) = identity_wm();
        let g = path_graph();
        let mut bank = ObservationBank::new();
        bank.add(&g, 0, &[0.0, -1.0, 0.0, 0.0]).unwrap();
        bank.add(&g, 1, &[-1.0, 0.0, 0.0, 0.0]).unwrap();
        bank.add(&g, 2, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        bank.add(&g, 3, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        bank.add(&g, 4, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let tau = ImaginedTrajectory {
            states: vec![
                state_with_full([1.0, 0.0, 0.0, 0.0]),
                state_with_full([0.0, 1.0, 0.0, 0.0]),
            ],
            predicted_rewards: vec![10.0, 10.0],
        };
        let cfg = RetrievalConfig {
            width: 1,
            rho_o: 0.0,
            ..RetrievalConfig::default()
        };
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(2, &[0.0, 0.0, 1.0, 1.0]);
        let out =
            retrieve_observations(&cfg, &wm, &store, &g, 2, &tau, &bank, &mut episodic).unwrap();
        let retrieved: Vec<ViewpointId> = out.retrieved.iter().copied().collect();
        assert_eq!(retrieved, vec![2, 3, 4]);
        assert_eq!(out.per_step_survivors, vec![vec![3], vec![4]]);
        // merged nodes carry bank features and the retrieved category
        for v in [3u32, 4] {
            let node = episodic.node(v).unwrap();
            assert_eq!(node.category, NodeCategory::Retrieved);
            assert_eq!(node.feature(), bank.get(v).unwrap());
        }
        // graph edges mirror the persistent graph along the merged path
        assert!(episodic.edge_pairs().contains(&(2, 3)));
        assert!(episodic.edge_pairs().contains(&(3, 4)));
    }

    #[test]
    fn retrieve_observations_full_width_covers_all_rings() {
        // With width >= |V| and rho = 0 the retrieved set is the union of
        // shortest paths to every scoreable viewpoint within the horizon.
        let (wm, store) = identity_wm();
        let scene = crate::env::SceneGraph::from_edges(
            3,
            8,
            &[
                (0, 1, 1.0),
                (0, 2, 2.0),
                (1, 3, 1.5),
                (2, 3, 1.0),
                (3, 4, 2.0),
                (4, 5, 1.0),
                (2, 6, 1.0),
                (6, 7, 2.5),
            ],
            4,
            4,
        )
        .unwrap();
        let mut g = PersistentGraph::new();
        for v in scene.viewpoints() {
            g.add_viewpoint(v);
        }
        for (a, b, w) in scene.edges() {
            g.add_edge(a, b, w);
        }
        let mut bank = ObservationBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in scene.viewpoints() {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.add(&g, v, &x).unwrap();
        }
        let horizon = 3;
        let tau = ImaginedTrajectory {
            states: (0..horizon).map(|_| rand_state(&mut rng)).collect(),
            predicted_rewards: vec![10.0; horizon],
        };
        let cfg = RetrievalConfig {
            width: 100,
            rho_o: 0.0,
            ..RetrievalConfig::default()
        };
        let v_t = 0;
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(v_t, &scene.pooled(v_t));
        let out =
            retrieve_observations(&cfg, &wm, &store, &g, v_t, &tau, &bank, &mut episodic).unwrap();

        // independent expectation: BFS rings + geodesic paths on the scene
        let mut expect: BTreeSet<ViewpointId> = BTreeSet::new();
        let mut dist: BTreeMap<ViewpointId, usize> = BTreeMap::new();
        dist.insert(v_t, 0);
        let mut queue = std::collections::VecDeque::from([v_t]);
        while let Some(cur) = queue.pop_front() {
            for &(u, _) in scene.neighbors(cur) {
                if !dist.contains_key(&u) {
                    dist.insert(u, dist[&cur] + 1);
                    queue.push_back(u);
                }
            }
        }
        for (&v, &d) in &dist {
            if d >= 1 && d <= horizon {
                let (_, path) = crate::env::geodesic(&scene, v_t, v);
                expect.extend(path);
            }
        }
        assert_eq!(out.retrieved, expect);
    }

    #[test]
    fn retrieve_histories_no_patterns_is_noop() {
        let (wm, store) = identity_wm();
        let g = path_graph();
        let bank = HistoryBank::new();
        let obs = ObservationBank::new();
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(0, &[0.0; 4]);
        let tau = ImaginedTrajectory {
            states: vec![state_with_full([1.0, 0.0, 0.0, 0.0])],
            predicted_rewards: vec![10.0],
        };
        let before = episodic.node_ids();
        let out = retrieve_histories(
            &RetrievalConfig::default(),
            &wm,
            &store,
            &g,
            0,
            &tau,
            &bank,
            &obs,
            &mut episodic,
        )
        .unwrap();
        assert!(out.patterns.is_empty());
        assert_eq!(episodic.node_ids(), before);
    }

    #[test]
    fn retrieve_histories_identical_pattern_matches_fully() {
        let (wm, store) = identity_wm();
        let g = path_graph();
        let mut obs = ObservationBank::new();
        for v in 0..5u32 {
            obs.add(&g, v, &[v as f64 + 1.0, 0.0, 0.0, 0.0]).unwrap();
        }
        let mut hist = HistoryBank::new();
        // past episode walked 0 -> 1 -> 2 -> 3; at viewpoint 0 it imagined
        // exactly what the query imagines now
        let imagined: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        hist.add(&g, 0, vec![0.5; 4], imagined.clone(), 0).unwrap();
        for (step, v) in [1u32, 2, 3].iter().enumerate() {
            hist.add(&g, *v, vec![step as f64; 4], vec![], 0).unwrap();
        }
        let tau = ImaginedTrajectory {
            states: vec![
                state_with_full([1.0, 0.0, 0.0, 0.0]),
                state_with_full([0.0, 1.0, 0.0, 0.0]),
                state_with_full([0.0, 0.0, 1.0, 0.0]),
            ],
            predicted_rewards: vec![10.0; 3],
        };
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(0, &[1.0, 0.0, 0.0, 0.0]);
        let out = retrieve_histories(
            &RetrievalConfig::default(),
            &wm,
            &store,
            &g,
            0,
            &tau,
            &hist,
            &obs,
            &mut episodic,
        )
        .unwrap();
        assert_eq!(out.patterns.len(), 1);
        let p = &out.patterns[0];
        assert_eq!(p.scores.len(), 3, "match runs to min horizon");
        for c in &p.scores {
            assert!((c - 1.0).abs() < 1e-12, "self-similarity scores 1: {c}");
        }
        assert_eq!(p.window, vec![1, 2, 3]);
        assert_eq!(p.original, vec![0, 1, 2, 3]);
        // replayed viewpoints carry the stored states and scores
        for (i, v) in [1u32, 2, 3].iter().enumerate() {
            let node = episodic.node(*v).unwrap();
            assert_eq!(node.attachments.len(), 1);
            assert_eq!(node.attachments[0].state, vec![i as f64; 4]);
        }
    }

    #[test]
    fn retrieve_histories_ranking_matches_brute_force() {
        let (wm, store) = identity_wm();
        let g = path_graph();
        let mut obs = ObservationBank::new();
        for v in 0..5u32 {
            obs.add(&g, v, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        }
        let e = |i: usize| -> Vec<f64> {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let mut hist = HistoryBank::new();
        // episode 0: anchored at 2, trajectory matches the query 3 steps
        hist.add(&g, 2, vec![0.1; 4], vec![e(0), e(1), e(2)], 0).unwrap();
        hist.add(&g, 3, vec![0.2; 4], vec![], 0).unwrap();
        hist.add(&g, 4, vec![0.3; 4], vec![], 0).unwrap();
        hist.add(&g, 3, vec![0.35; 4], vec![], 0).unwrap();
        // episode 1: matches 1 step then diverges (antipodal second step)
        hist.add(&g, 2, vec![0.4; 4], vec![e(0), e(1).iter().map(|v| -v).collect()], 1)
            .unwrap();
        hist.add(&g, 1, vec![0.5; 4], vec![], 1).unwrap();
        // episode 2: matches 2 steps
        hist.add(&g, 2, vec![0.6; 4], vec![e(0), e(1)], 2).unwrap();
        hist.add(&g, 1, vec![0.7; 4], vec![], 2).unwrap();
        hist.add(&g, 0, vec![0.8; 4], vec![], 2).unwrap();

        let tau = ImaginedTrajectory {
            states: vec![
                state_with_full([1.0, 0.0, 0.0, 0.0]),
                state_with_full([0.0, 1.0, 0.0, 0.0]),
                state_with_full([0.0, 0.0, 1.0, 0.0]),
            ],
            predicted_rewards: vec![10.0; 3],
        };
        let cfg = RetrievalConfig {
            max_patterns: 2,
            ..RetrievalConfig::default()
        };
        let mut episodic = EpisodicGraph::new(4);
        episodic.map_visit(2, &[1.0, 1.0, 1.0, 1.0]);
        let out = retrieve_histories(
            &cfg, &wm, &store, &g, 2, &tau, &hist, &obs, &mut episodic,
        )
        .unwrap();
        // brute force: episode 0 matched 3 steps, episode 2 matched 2,
        // episode 1 matched 1; top 2 in order
        assert_eq!(out.patterns.len(), 2);
        assert_eq!(out.patterns[0].record.episode_id, 0);
        assert_eq!(out.patterns[0].scores.len(), 3);
        assert_eq!(out.patterns[1].record.episode_id, 2);
        assert_eq!(out.patterns[1].scores.len(), 2);
        // windows follow the episode logs
        assert_eq!(out.patterns[0].window, vec![3, 4, 3]);
        assert_eq!(out.patterns[1].window, vec![1, 0]);
    }

    #[test]
    fn bank_add_and_averaging_rules() {
        let g = path_graph();
        let mut obs = ObservationBank::new();
        obs.add(&g, 1, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(obs.get(1).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        obs.add(&g, 1, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(obs.get(1).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(obs.visit_count(1), 2);
        assert!(matches!(
            obs.add(&g, 99, &[0.0; 4]),
            Err(MemoryError::UnknownViewpoint(99))
        ));

        let mut hist = HistoryBank::new();
        for k in 0..3u64 {
            hist.add(&g, 2, vec![k as f64; 4], vec![], k).unwrap();
        }
        let records = hist.records_at(2);
        assert_eq!(records.len(), 3, "N_j equals the number of adds");
        for (k, (r, entry)) in records.iter().enumerate() {
            assert_eq!(r.episode_id, k as u64, "order preserved");
            assert_eq!(entry.state, vec![k as f64; 4]);
        }
        assert!(hist.add(&g, 99, vec![0.0; 4], vec![], 0).is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        // empty
        let (obs0, hist0, graph0) = (
            ObservationBank::new(),
            HistoryBank::new(),
            PersistentGraph::new(),
        );
        let bytes = snapshot(&obs0, &hist0, &graph0);
        let (o, h, g) = restore(&bytes).unwrap();
        assert_eq!(o, obs0);
        assert_eq!(h, hist0);
        assert_eq!(g, graph0);

        // populated
        let g = path_graph();
        let mut obs = ObservationBank::new();
        let mut hist = HistoryBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in 0..5u32 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            obs.add(&g, v, &x).unwrap();
        }
        obs.add(&g, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for (step, v) in [0u32, 1, 2].iter().enumerate() {
            let traj: Vec<Vec<f64>> = (0..=step)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            hist.add(&g, *v, vec![step as f64; 4], traj, 7).unwrap();
        }
        let bytes = snapshot(&obs, &hist, &g);
        let (o, h, g2) = restore(&bytes).unwrap();
        assert_eq!(o, obs);
        assert_eq!(h, hist);
        assert_eq!(g2, g);

        // corruption
        assert!(restore(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(restore(&bad).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            restore(&wrong_version),
            Err(MemoryError::VersionMismatch(_))
        ));
    }

    #[test]
    fn episodic_graph_categories_and_hop_matrix() {
        let mut g = EpisodicGraph::new(2);
        g.map_visit(5, &[1.0, 0.0]);
        g.map_frontier(6, &[0.0, 1.0]);
        g.add_edge(5, 6);
        assert_eq!(g.node(5).unwrap().category, NodeCategory::Current);
        assert_eq!(g.node(6).unwrap().category, NodeCategory::Frontier);
        g.map_visit(6, &[0.5, 0.5]);
        assert_eq!(g.node(5).unwrap().category, NodeCategory::Visited);
        assert_eq!(g.node(6).unwrap().category, NodeCategory::Current);
        assert_eq!(g.current(), Some(6));
        // exactly one current node
        let currents = g
            .node_ids()
            .into_iter()
            .filter(|&v| g.node(v).unwrap().category == NodeCategory::Current)
            .count();
        assert_eq!(currents, 1);
        // frontier feature averaging
        g.map_frontier(7, &[1.0, 0.0]);
        g.map_frontier(7, &[0.0, 1.0]);
        assert_eq!(g.node(7).unwrap().feature(), vec![0.5, 0.5]);
        g.add_edge(6, 7);
        let order = vec![5, 6, 7];
        let m = g.hop_matrix(&order);
        assert_eq!(m.at(0, 0), 0.0);
        assert_eq!(m.at(0, 1), 1.0);
        assert_eq!(m.at(0, 2), 2.0);
        assert_eq!(m.at(2, 0), 2.0);
        // symmetry with zero diagonal
        for i in 0..3 {
            assert_eq!(m.at(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(m.at(i, j), m.at(j, i));
            }
        }
    }

    #[test]
    fn persistent_graph_paths_and_rings() {
        let mut g = PersistentGraph::new();
        for v in 0..4 {
            g.add_viewpoint(v);
        }
        g.add_edge(0, 1, 1.0);
        g.add_edge(0, 2, 1.0);
        g.add_edge(1, 3, 1.0);
        g.add_edge(2, 3, 1.0);
        // lexicographic tie-break between 0-1-3 and 0-2-3
        assert_eq!(g.shortest_path(0, 3).unwrap(), vec![0, 1, 3]);
        assert_eq!(g.shortest_path(0, 0).unwrap(), vec![0]);
        let rings = g.hop_rings(0, 3);
        assert_eq!(rings[0], vec![1, 2]);
        assert_eq!(rings[1], vec![3]);
        assert!(rings[2].is_empty());
        // disconnected target
        g.add_viewpoint(9);
        assert!(g.shortest_path(0, 9).is_none());
    }
}
