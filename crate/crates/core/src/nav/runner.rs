//! The navigation loop: map, infer, imagine, retrieve (per mode), update
//! banks, score, act. Selecting a non-adjacent target triggers hop-by-hop
//! traversal along the shortest known path; every hop is recorded so path
//! length metrics see the true walked distance.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{env_step, observe, Action, Episode, Observation, SceneGraph, ViewpointId};
use crate::memory::{
    merge_retrieved_viewpoint, retrieve_histories, retrieve_observations, EpisodicGraph,
    HistoryBank, ObservationBank, PersistentGraph, RetrievalConfig,
};
use crate::tensor::{ParamStore, Tape};
use crate::world::{LatentState, StepMode, WorldModel};

use super::{select_action, ActionTarget, GraphView, NavError, NavMode, NavModel};

/// Tour-scoped memory: persistent graph plus both banks. Exclusively owned
/// by one episode runner at a time.
#[derive(Debug, Clone, Default)]
pub struct TourBanks {
    pub persistent: PersistentGraph,
    pub obs: ObservationBank,
    pub hist: HistoryBank,
}

impl TourBanks {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One replayed history pattern as logged in a trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistTraceLog {
    pub window: Vec<ViewpointId>,
    pub original: Vec<ViewpointId>,
}

/// Everything recorded at one decision step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub current: ViewpointId,
    pub candidates: Vec<ActionTarget>,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
    pub history: Vec<f64>,
    pub sigma: [f64; 3],
    pub final_scores: Vec<f64>,
    pub action: ActionTarget,
    /// Viewpoints entered while executing the action (empty for stop).
    pub executed_hops: Vec<ViewpointId>,
    pub retrieved_obs: Vec<ViewpointId>,
    pub retrieved_hist: Vec<HistTraceLog>,
    pub horizon: usize,
    /// Observation-bank keys at retrieval time.
    pub obs_bank_vps: Vec<ViewpointId>,
    /// Hop distance from the current viewpoint to each teacher-path
    /// viewpoint in the persistent graph at retrieval time (None when the
    /// viewpoint is not yet known).
    pub teacher_hops: Vec<Option<usize>>,
}

/// Full record of one navigated episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode_index: usize,
    pub mode: NavMode,
    pub start: ViewpointId,
    pub goal: ViewpointId,
    /// Every viewpoint occupied, starting with `start`, including traversal
    /// hops.
    pub path: Vec<ViewpointId>,
    pub stopped: bool,
    pub steps: Vec<StepLog>,
}

impl EpisodeTrace {
    /// JSON-lines serialization: one meta object, then one object per
    /// decision step.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Meta<'a> {
            record: &'static str,
            episode_index: usize,
            mode: &'a str,
            start: ViewpointId,
            goal: ViewpointId,
            path: &'a [ViewpointId],
            stopped: bool,
        }
        let mut out = serde_json::to_string(&Meta {
            record: "episode",
            episode_index: self.episode_index,
            mode: self.mode.as_str(),
            start: self.start,
            goal: self.goal,
            path: &self.path,
            stopped: self.stopped,
        })
        .expect("meta serializes");
        for step in &self.steps {
            out.push('\n');
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
        }
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOpts {
    pub mode: NavMode,
    pub t_max: usize,
    pub retrieval: RetrievalConfig,
    /// Seed for mode-internal sampling (random-memory).
    pub seed: u64,
}

pub(crate) fn map_current(
    episodic: &mut EpisodicGraph,
    banks: &mut TourBanks,
    scene: &SceneGraph,
    v: ViewpointId,
    obs: &Observation,
) {
    episodic.map_visit(v, &obs.pooled);
    banks.persistent.add_viewpoint(v);
    for (&u, &dir) in &obs.neighbor_directions {
        episodic.map_frontier(u, &obs.views[dir]);
        episodic.add_edge(v, u);
        banks.persistent.add_viewpoint(u);
        let len = scene.edge_len(v, u).expect("observed neighbors are adjacent");
        banks.persistent.add_edge(v, u, len);
    }
}

fn persistent_hops_from(
    persistent: &PersistentGraph,
    src: ViewpointId,
    targets: &[ViewpointId],
) -> Vec<Option<usize>> {
    use std::collections::{BTreeMap, VecDeque};
    let mut dist: BTreeMap<ViewpointId, usize> = BTreeMap::new();
    if persistent.contains(src) {
        dist.insert(src, 0);
        let mut queue = VecDeque::from([src]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            for (u, _) in persistent.neighbors(cur) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                    e.insert(d + 1);
                    queue.push_back(u);
                }
            }
        }
    }
    targets.iter().map(|v| dist.get(v).copied()).collect()
}

/// Run one episode under the given memory mode. Banks persist across calls
/// within a tour; the episodic graph is rebuilt from scratch.
#[allow(clippy::too_many_arguments)]
pub fn navigate_episode(
    scene: &SceneGraph,
    episode: &Episode,
    episode_index: usize,
    banks: &mut TourBanks,
    wm: &WorldModel,
    nav: &NavModel,
    store: &ParamStore,
    opts: &EpisodeOpts,
) -> Result<EpisodeTrace, NavError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (episode_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut episodic = EpisodicGraph::new(scene.feat_dim);
    let mut cur = episode.start;
    let mut obs = observe(scene, cur);
    let mut prev_state = wm.initial_state();
    let mut path = vec![cur];
    let mut steps: Vec<StepLog> = Vec::new();
    let mut stopped = false;

    for step in 0..opts.t_max {
        map_current(&mut episodic, banks, scene, cur, &obs);

        let state = wm.infer(
            store,
            &prev_state,
            &obs.pooled,
            &episode.instruction,
            StepMode::Deterministic,
        )?;
        let tau = wm.imagine(store, &state, StepMode::Deterministic)?;

        let obs_bank_vps: Vec<ViewpointId> = banks.obs.viewpoints().collect();
        let teacher_hops =
            persistent_hops_from(&banks.persistent, cur, &episode.teacher_path);

        let (retrieved_obs, retrieved_hist) = apply_mode_retrieval(
            opts,
            wm,
            store,
            banks,
            &mut episodic,
            cur,
            &tau,
            episode,
            &mut rng,
        )?;

        banks.obs.add(&banks.persistent, cur, &obs.pooled)?;
        banks.hist.add(
            &banks.persistent,
            cur,
            state.full(),
            tau.states.iter().map(LatentState::full).collect(),
            episode_index as u64,
        )?;

        let view = GraphView::from_episodic(&episodic, &obs);
        let mut tape = Tape::new();
        let decision = nav.decide(&mut tape, store, &view, &obs, &episode.instruction)?;
        let final_scores = tape.value(decision.final_scores).data.clone();
        let sigma_row = tape.value(decision.sigma).data.clone();
        let action = select_action(&decision.candidates, &final_scores);

        let mut log = StepLog {
            step,
            current: cur,
            candidates: decision.candidates.clone(),
            coarse: tape.value(decision.coarse).data.clone(),
            fine: tape.value(decision.fine).data.clone(),
            history: tape.value(decision.history).data.clone(),
            sigma: [sigma_row[0], sigma_row[1], sigma_row[2]],
            final_scores,
            action,
            executed_hops: Vec::new(),
            retrieved_obs,
            retrieved_hist,
            horizon: tau.horizon(),
            obs_bank_vps,
            teacher_hops,
        };

        match action {
            ActionTarget::Stop => {
                stopped = true;
                steps.push(log);
                break;
            }
            ActionTarget::Node(target) => {
                let hop_path = if scene.edge_len(cur, target).is_some() {
                    vec![cur, target]
                } else {
                    banks
                        .persistent
                        .shortest_path(cur, target)
                        .ok_or(NavError::Unreachable { from: cur, to: target })?
                };
                for (k, &hop) in hop_path.iter().enumerate().skip(1) {
                    let (new_obs, new_vp, _gamma) =
                        env_step(scene, cur, Action::MoveTo(hop), episode.goal)?;
                    cur = new_vp;
                    obs = new_obs;
                    path.push(cur);
                    log.executed_hops.push(cur);
                    // map intermediate hops; the arrival viewpoint is mapped
                    // at the top of the next decision step
                    if k + 1 < hop_path.len() {
                        map_current(&mut episodic, banks, scene, cur, &obs);
                    }
                }
                steps.push(log);
            }
        }
        prev_state = state;
    }

    Ok(EpisodeTrace {
        episode_index,
        mode: opts.mode,
        start: episode.start,
        goal: episode.goal,
        path,
        stopped,
        steps,
    })
}

/// Returns the logged retrieved-observation set and history patterns for
/// this step, after expanding the episodic graph according to the mode.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_mode_retrieval(
    opts: &EpisodeOpts,
    wm: &WorldModel,
    store: &ParamStore,
    banks: &mut TourBanks,
    episodic: &mut EpisodicGraph,
    cur: ViewpointId,
    tau: &crate::world::ImaginedTrajectory,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ViewpointId>, Vec<HistTraceLog>), NavError> {
    match opts.mode {
        NavMode::NoMemory => Ok((Vec::new(), Vec::new())),
        NavMode::Memoir => {
            let obs_out = retrieve_observations(
                &opts.retrieval,
                wm,
                store,
                &banks.persistent,
                cur,
                tau,
                &banks.obs,
                episodic,
            )?;
            let hist_out = retrieve_histories(
                &opts.retrieval,
                wm,
                store,
                &banks.persistent,
                cur,
                tau,
                &banks.hist,
                &banks.obs,
                episodic,
            )?;
            Ok((
                obs_out.retrieved.into_iter().collect(),
                hist_out
                    .patterns
                    .into_iter()
                    .map(|p| HistTraceLog {
                        window: p.window,
                        original: p.original,
                    })
                    .collect(),
            ))
        }
        NavMode::RandomMemory => {
            // cardinality probe on a scratch copy of the episodic graph
            let mut scratch = episodic.clone();
            let obs_out = retrieve_observations(
                &opts.retrieval,
                wm,
                store,
                &banks.persistent,
                cur,
                tau,
                &banks.obs,
                &mut scratch,
            )?;
            let hist_out = retrieve_histories(
                &opts.retrieval,
                wm,
                store,
                &banks.persistent,
                cur,
                tau,
                &banks.hist,
                &banks.obs,
                &mut scratch,
            )?;
            let n_obs = obs_out.retrieved.len();
            let n_pat = hist_out.patterns.len();

            // uniform observation sample of the same cardinality
            let mut pool: Vec<ViewpointId> = banks.obs.viewpoints().collect();
            let mut sampled: BTreeSet<ViewpointId> = BTreeSet::new();
            for _ in 0..n_obs.min(pool.len()) {
                let k = rng.random_range(0..pool.len());
                sampled.insert(pool.swap_remove(k));
            }
            let mut skipped = 0;
            for &v in &sampled {
                merge_retrieved_viewpoint(episodic, &banks.persistent, &banks.obs, v, &mut skipped);
            }

            // uniform pattern sample of the same cardinality
            let records = banks.hist.records_at(cur);
            let mut idxs: Vec<usize> = (0..records.len()).collect();
            let mut chosen = Vec::new();
            for _ in 0..n_pat.min(idxs.len()) {
                let k = rng.random_range(0..idxs.len());
                chosen.push(idxs.swap_remove(k));
            }
            chosen.sort_unstable();
            let mut hist_logs = Vec::with_capacity(chosen.len());
            for idx in chosen {
                let (record, entry) = records[idx];
                let len = tau.horizon().min(entry.trajectory.len());
                // real compatibility scores so attachments stay meaningful
                let entries = banks.hist.trace(record, len);
                let mut window = Vec::with_capacity(entries.len());
                for (i, e) in entries.iter().enumerate() {
                    let merged = merge_retrieved_viewpoint(
                        episodic,
                        &banks.persistent,
                        &banks.obs,
                        e.viewpoint,
                        &mut skipped,
                    );
                    if merged || episodic.contains(e.viewpoint) {
                        let qe = wm.embed_state_values(store, &tau.states[i]);
                        let se = wm.embed_full_values(store, &entry.trajectory[i]);
                        let c = 0.5 * (crate::tensor::cosine_sim(&qe, &se)? + 1.0);
                        episodic.attach_history(e.viewpoint, e.state.clone(), c);
                    }
                    window.push(e.viewpoint);
                }
                hist_logs.push(HistTraceLog {
                    window,
                    original: banks.hist.episode_viewpoints(record.episode_id),
                });
            }
            Ok((sampled.into_iter().collect(), hist_logs))
        }
        NavMode::FullMemory => {
            let mut skipped = 0;
            let all: Vec<ViewpointId> = banks.obs.viewpoints().collect();
            for &v in &all {
                merge_retrieved_viewpoint(episodic, &banks.persistent, &banks.obs, v, &mut skipped);
            }
            let records = banks.hist.records_at(cur);
            let mut hist_logs = Vec::with_capacity(records.len());
            for (record, entry) in records {
                let len = tau.horizon().min(entry.trajectory.len());
                let entries = banks.hist.trace(record, len);
                let mut window = Vec::with_capacity(entries.len());
                for (i, e) in entries.iter().enumerate() {
                    let merged = merge_retrieved_viewpoint(
                        episodic,
                        &banks.persistent,
                        &banks.obs,
                        e.viewpoint,
                        &mut skipped,
                    );
                    if merged || episodic.contains(e.viewpoint) {
                        let qe = wm.embed_state_values(store, &tau.states[i]);
                        let se = wm.embed_full_values(store, &entry.trajectory[i]);
                        let c = 0.5 * (crate::tensor::cosine_sim(&qe, &se)? + 1.0);
                        episodic.attach_history(e.viewpoint, e.state.clone(), c);
                    }
                    window.push(e.viewpoint);
                }
                hist_logs.push(HistTraceLog {
                    window,
                    original: banks.hist.episode_viewpoints(record.episode_id),
                });
            }
            Ok((all, hist_logs))
        }
        NavMode::OracleMemory => {
            // retrieved set: exactly the teacher-path viewpoints within D
            // hops that the observation bank knows
            let hops = persistent_hops_from(&banks.persistent, cur, &episode.teacher_path);
            let d_max = wm.cfg.max_horizon;
            let mut oracle_set: BTreeSet<ViewpointId> = BTreeSet::new();
            for (v, hop) in episode.teacher_path.iter().zip(hops.iter()) {
                if let Some(h) = hop {
                    if *h <= d_max && banks.obs.contains(*v) {
                        oracle_set.insert(*v);
                    }
                }
            }
            let mut skipped = 0;
            for &v in &oracle_set {
                merge_retrieved_viewpoint(episodic, &banks.persistent, &banks.obs, v, &mut skipped);
            }

            // histories: records at the current viewpoint whose subsequent
            // visits follow the teacher path; replay the on-path prefix
            let teacher: BTreeSet<ViewpointId> = episode.teacher_path.iter().copied().collect();
            let records = banks.hist.records_at(cur);
            struct OraclePattern {
                record: crate::memory::RecordRef,
                len: usize,
            }
            let mut patterns: Vec<OraclePattern> = Vec::new();
            for (record, _) in &records {
                let entries = banks.hist.trace(*record, d_max);
                let len = entries
                    .iter()
                    .take_while(|e| teacher.contains(&e.viewpoint))
                    .count();
                if len > 0 {
                    patterns.push(OraclePattern { record: *record, len });
                }
            }
            patterns.sort_by(|a, b| {
                b.len
                    .cmp(&a.len)
                    .then_with(|| a.record.episode_id.cmp(&b.record.episode_id))
                    .then_with(|| a.record.step.cmp(&b.record.step))
            });
            patterns.truncate(opts.retrieval.max_patterns);
            let mut hist_logs = Vec::with_capacity(patterns.len());
            for p in patterns {
                let entries = banks.hist.trace(p.record, p.len);
                let mut window = Vec::with_capacity(entries.len());
                for e in entries {
                    let merged = merge_retrieved_viewpoint(
                        episodic,
                        &banks.persistent,
                        &banks.obs,
                        e.viewpoint,
                        &mut skipped,
                    );
                    if merged || episodic.contains(e.viewpoint) {
                        episodic.attach_history(e.viewpoint, e.state.clone(), 1.0);
                    }
                    window.push(e.viewpoint);
                }
                hist_logs.push(HistTraceLog {
                    window,
                    original: banks.hist.episode_viewpoints(p.record.episode_id),
                });
            }
            Ok((oracle_set.into_iter().collect(), hist_logs))
        }
    }
}
