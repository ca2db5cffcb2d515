//! Three-branch navigation policy over the episodic graph.
//!
//! The coarse branch scores every graph node through instruction
//! cross-attention and one graph-aware self-attention layer whose additive
//! bias is a learned affine function of pairwise hop distances. The fine
//! branch scores the current panorama's directional views and lifts them to
//! the global action space (non-neighbors receive a backtrack aggregate).
//! The history branch fuses replayed states with node features and scores
//! the visited-or-replayed subset. A learned softmax over the three encoded
//! stop tokens mixes the branches into final scores.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Observation, ViewpointId};
use crate::memory::{EpisodicGraph, MemoryError, NodeCategory};
use crate::tensor::{
    attention_nodes, attention_proj_init, dense, dense_init, logsumexp, xavier, Mat, NodeId,
    ParamStore, Tape, TensorError,
};
use crate::world::WorldError;

/// Fine-branch lift value for candidates with no visited neighbor to back
/// up through. Large negative rather than -inf so fusion arithmetic stays
/// finite.
pub const BACKTRACK_SENTINEL: f64 = -1e9;

#[derive(Debug, Error)]
pub enum NavError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no known route from {from} to {to}")]
    Unreachable { from: ViewpointId, to: ViewpointId },
    #[error("training diverged at pass {pass}, episode {episode}: {source}")]
    Diverged {
        pass: usize,
        episode: usize,
        source: TensorError,
    },
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Memory handling during navigation, mirroring the ablation matrix:
/// imagination-guided retrieval, no retrieval, uniform random retrieval of
/// matching cardinality, complete incorporation, and oracle retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NavMode {
    Memoir,
    NoMemory,
    RandomMemory,
    FullMemory,
    OracleMemory,
}

impl NavMode {
    pub const ALL: [NavMode; 5] = [
        NavMode::NoMemory,
        NavMode::FullMemory,
        NavMode::RandomMemory,
        NavMode::Memoir,
        NavMode::OracleMemory,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NavMode::Memoir => "memoir",
            NavMode::NoMemory => "no-memory",
            NavMode::RandomMemory => "random-memory",
            NavMode::FullMemory => "full-memory",
            NavMode::OracleMemory => "oracle-memory",
        }
    }
}

impl std::str::FromStr for NavMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memoir" => Ok(NavMode::Memoir),
            "no-memory" => Ok(NavMode::NoMemory),
            "random-memory" => Ok(NavMode::RandomMemory),
            "full-memory" => Ok(NavMode::FullMemory),
            "oracle-memory" => Ok(NavMode::OracleMemory),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// A scored navigation target: stop, or any node of the episodic graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionTarget {
    Stop,
    Node(ViewpointId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavConfig {
    pub d_model: usize,
    pub feat_dim: usize,
    pub instr_dim: usize,
    /// Full world-model state size (h + z), for history attachments.
    pub state_dim: usize,
    /// Temperature for the attachment-score softmax.
    pub zeta: f64,
    /// Maximum decision steps per episode.
    pub t_max: usize,
}

impl NavConfig {
    pub fn new(feat_dim: usize, instr_dim: usize, state_dim: usize) -> Self {
        NavConfig {
            d_model: 32,
            feat_dim,
            instr_dim,
            state_dim,
            zeta: 0.1,
            t_max: 15,
        }
    }

    pub fn validate(&self) -> Result<(), NavError> {
        if self.instr_dim != 2 * self.feat_dim {
            return Err(NavError::BadConfig(
                "instruction must be goal feature ++ path feature".into(),
            ));
        }
        if self.t_max == 0 || self.zeta <= 0.0 {
            return Err(NavError::BadConfig("t_max and zeta must be positive".into()));
        }
        Ok(())
    }
}

fn category_index(cat: NodeCategory) -> usize {
    match cat {
        NodeCategory::Current => 0,
        NodeCategory::Visited => 1,
        NodeCategory::Frontier => 2,
        NodeCategory::Retrieved => 3,
    }
}

/// Immutable per-decision view of the episodic graph in an explicit node
/// order, plus everything the branches need from the live observation.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub order: Vec<ViewpointId>,
    pub feats: Vec<Vec<f64>>,
    pub cats: Vec<NodeCategory>,
    pub attachments: Vec<Vec<(Vec<f64>, f64)>>,
    /// Pairwise hop distances in `order`, without the stop token.
    pub hops: Mat,
    pub current: ViewpointId,
    /// Neighbors of the current node in the episodic graph, with their
    /// direction slot in the panorama.
    pub neighbor_dirs: BTreeMap<ViewpointId, usize>,
}

impl GraphView {
    /// Build a view in ascending node-id order.
    pub fn from_episodic(graph: &EpisodicGraph, obs: &Observation) -> Self {
        let order = graph.node_ids();
        Self::with_order(graph, obs, order)
    }

    /// Build a view with a caller-chosen node order (node set must match).
    pub fn with_order(
        graph: &EpisodicGraph,
        obs: &Observation,
        order: Vec<ViewpointId>,
    ) -> Self {
        let current = graph.current().expect("graph has a current node");
        let mut feats = Vec::with_capacity(order.len());
        let mut cats = Vec::with_capacity(order.len());
        let mut attachments = Vec::with_capacity(order.len());
        for &v in &order {
            let node = graph.node(v).expect("order refers to graph nodes");
            feats.push(node.feature());
            cats.push(node.category);
            attachments.push(
                node.attachments
                    .iter()
                    .map(|a| (a.state.clone(), a.score))
                    .collect(),
            );
        }
        let hops = graph.hop_matrix(&order);
        let mut neighbor_dirs = BTreeMap::new();
        for u in graph.edges_of(current) {
            if let Some(&dir) = obs.neighbor_directions.get(&u) {
                neighbor_dirs.insert(u, dir);
            }
        }
        GraphView {
            order,
            feats,
            cats,
            attachments,
            hops,
            current,
            neighbor_dirs,
        }
    }

    /// Stop followed by every node except the current one.
    pub fn candidates(&self) -> Vec<ActionTarget> {
        let mut out = vec![ActionTarget::Stop];
        out.extend(
            self.order
                .iter()
                .filter(|&&v| v != self.current)
                .map(|&v| ActionTarget::Node(v)),
        );
        out
    }
}

/// Branch and fused scores for one decision, as tape nodes plus the
/// realized candidate list. Values are read through the owning tape.
pub struct DecisionNodes {
    pub candidates: Vec<ActionTarget>,
    pub coarse: NodeId,
    pub fine: NodeId,
    pub history: NodeId,
    pub sigma: NodeId,
    pub final_scores: NodeId,
}

pub struct NavModel {
    pub cfg: NavConfig,
}

impl NavModel {
    pub fn new(cfg: NavConfig) -> Result<Self, NavError> {
        cfg.validate()?;
        Ok(NavModel { cfg })
    }

    /// Register all trainable parameters under the `nav.` prefix.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_model;
        let f = self.cfg.feat_dim;
        dense_init(store, "nav.node_proj", f, d, rng);
        store.insert("nav.type_embed", xavier(4, d, rng));
        dense_init(store, "nav.instr_proj", f, d, rng);
        store.insert("nav.instr_pos", xavier(2, d, rng));

        store.insert("nav.coarse.stop", xavier(1, d, rng));
        attention_proj_init(store, "nav.coarse.xattn", d, d, rng);
        attention_proj_init(store, "nav.coarse.gasa", d, d, rng);
        store.insert("nav.coarse.gasa_we", Mat::zeros(1, 1));
        store.insert("nav.coarse.gasa_be", Mat::zeros(1, 1));
        dense_init(store, "nav.coarse.ffn", d, d, rng);
        dense_init(store, "nav.coarse.score", d, 1, rng);

        dense_init(store, "nav.fine.view_proj", f, d, rng);
        store.insert("nav.fine.stop", xavier(1, d, rng));
        attention_proj_init(store, "nav.fine.xattn", d, d, rng);
        dense_init(store, "nav.fine.ffn", d, d, rng);
        dense_init(store, "nav.fine.score", d, 1, rng);

        dense_init(store, "nav.hist.state_proj", self.cfg.state_dim, d, rng);
        dense_init(store, "nav.hist.obs_proj", f, d, rng);
        store.insert("nav.hist.stop", xavier(1, d, rng));
        attention_proj_init(store, "nav.hist.attn", d, d, rng);
        dense_init(store, "nav.hist.ffn", d, d, rng);
        dense_init(store, "nav.hist.score", d, 1, rng);
        store.insert("nav.hist.s0", Mat::zeros(1, 1));

        dense_init(store, "nav.fuse.fc", 3 * d, d, rng);
        dense_init(store, "nav.fuse.out", d, 3, rng);
    }

    /// Instruction as two projected tokens: goal half and path half.
    fn instr_tokens(&self, tape: &mut Tape, store: &ParamStore, instr: &[f64]) -> NodeId {
        let f = self.cfg.feat_dim;
        assert_eq!(instr.len(), 2 * f, "instruction layout");
        let goal = tape.constant_row(&instr[..f]);
        let path = tape.constant_row(&instr[f..]);
        let pos = tape.param(store, "nav.instr_pos");
        let stacked = {
            let g = dense(tape, store, "nav.instr_proj", goal);
            let p = dense(tape, store, "nav.instr_proj", path);
            tape.concat_rows(&[g, p])
        };
        tape.add(stacked, pos)
    }

    fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        seq: NodeId,
        ctx: NodeId,
    ) -> NodeId {
        let wq = tape.param(store, &format!("{prefix}.wq"));
        let wk = tape.param(store, &format!("{prefix}.wk"));
        let wv = tape.param(store, &format!("{prefix}.wv"));
        let q = tape.matmul(seq, wq);
        let k = tape.matmul(ctx, wk);
        let v = tape.matmul(ctx, wv);
        let att = attention_nodes(tape, q, k, v, None);
        tape.add(seq, att)
    }

    fn ffn_residual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        seq: NodeId,
    ) -> NodeId {
        let pre = dense(tape, store, prefix, seq);
        let act = tape.tanh(pre);
        tape.add(seq, act)
    }

    /// Coarse topological branch. Returns scores over [stop ++ order] as a
    /// `1 x (n+1)` row and the encoded stop token.
    pub fn coarse_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &GraphView,
        instr: &[f64],
    ) -> (NodeId, NodeId) {
        let n = view.order.len();
        let feats = {
            let rows: Vec<NodeId> = view.feats.iter().map(|f| tape.constant_row(f)).collect();
            tape.concat_rows(&rows)
        };
        let projected = dense(tape, store, "nav.node_proj", feats);
        let type_embed = tape.param(store, "nav.type_embed");
        let cat_idx: Vec<usize> = view.cats.iter().map(|&c| category_index(c)).collect();
        let types = tape.gather_rows(type_embed, &cat_idx);
        let nodes = tape.add(projected, types);
        let stop = tape.param(store, "nav.coarse.stop");
        let seq = tape.concat_rows(&[stop, nodes]);

        let instr_tok = self.instr_tokens(tape, store, instr);
        let seq = self.cross_attend(tape, store, "nav.coarse.xattn", seq, instr_tok);

        // distance bias M = w_e * E + b_e over [stop ++ nodes]; the stop
        // token sits at distance 0 from everything
        let mut e_full = Mat::zeros(n + 1, n + 1);
        for r in 0..n {
            for c in 0..n {
                *e_full.at_mut(r + 1, c + 1) = view.hops.at(r, c);
            }
        }
        let e_const = tape.constant(e_full);
        let we = tape.param(store, "nav.coarse.gasa_we");
        let be = tape.param(store, "nav.coarse.gasa_be");
        let scaled = tape.mul_scalar_node(e_const, we);
        let ones = tape.constant(Mat::from_vec(n + 1, n + 1, vec![1.0; (n + 1) * (n + 1)]));
        let be_full = tape.mul_scalar_node(ones, be);
        let bias = tape.add(scaled, be_full);

        let wq = tape.param(store, "nav.coarse.gasa.wq");
        let wk = tape.param(store, "nav.coarse.gasa.wk");
        let wv = tape.param(store, "nav.coarse.gasa.wv");
        let q = tape.matmul(seq, wq);
        let k = tape.matmul(seq, wk);
        let v = tape.matmul(seq, wv);
        let att = attention_nodes(tape, q, k, v, Some(bias));
        let seq = tape.add(seq, att);
        let seq = self.ffn_residual(tape, store, "nav.coarse.ffn", seq);

        let scores_col = dense(tape, store, "nav.coarse.score", seq);
        let scores = tape.transpose(scores_col);
        let stop_tok = tape.gather_rows(seq, &[0]);
        (scores, stop_tok)
    }

    /// Fine local branch: per-view scores lifted to [stop ++ order].
    /// Non-neighbors receive the log-sum-exp of visited-neighbor scores, or
    /// a large negative sentinel when the current node has no visited
    /// neighbor. Returns the lifted row and the encoded stop token.
    pub fn fine_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &GraphView,
        obs: &Observation,
        instr: &[f64],
    ) -> Result<(NodeId, NodeId), NavError> {
        let views = {
            let rows: Vec<NodeId> = obs.views.iter().map(|v| tape.constant_row(v)).collect();
            tape.concat_rows(&rows)
        };
        let projected = dense(tape, store, "nav.fine.view_proj", views);
        let stop = tape.param(store, "nav.fine.stop");
        let seq = tape.concat_rows(&[stop, projected]);
        let instr_tok = self.instr_tokens(tape, store, instr);
        let seq = self.cross_attend(tape, store, "nav.fine.xattn", seq, instr_tok);
        let seq = self.ffn_residual(tape, store, "nav.fine.ffn", seq);
        let scores_col = dense(tape, store, "nav.fine.score", seq);
        let per_view = tape.transpose(scores_col); // 1 x (K+1), col 0 = stop

        // backtrack aggregate over visited neighbors
        let visited_dirs: Vec<usize> = view
            .neighbor_dirs
            .iter()
            .filter(|(u, _)| {
                view.order
                    .iter()
                    .zip(view.cats.iter())
                    .any(|(&v, &c)| v == **u && c == NodeCategory::Visited)
            })
            .map(|(_, &dir)| dir + 1)
            .collect();
        let s_back = if visited_dirs.is_empty() {
            tape.scalar(BACKTRACK_SENTINEL)
        } else {
            let gathered = tape.gather_cols(per_view, &visited_dirs);
            tape.logsumexp_rows(gathered)
        };

        // lift to [stop ++ order]
        let mut parts: Vec<NodeId> = Vec::with_capacity(view.order.len() + 1);
        let stop_score = tape.gather_cols(per_view, &[0]);
        parts.push(stop_score);
        for &v in &view.order {
            if v == view.current {
                // placeholder for alignment; the current node is never a
                // candidate and is masked out downstream
                parts.push(s_back);
            } else if let Some(&dir) = view.neighbor_dirs.get(&v) {
                if dir + 1 >= tape.value(per_view).cols {
                    return Err(NavError::BadConfig(format!(
                        "direction index {dir} outside panorama"
                    )));
                }
                let s = tape.gather_cols(per_view, &[dir + 1]);
                parts.push(s);
            } else {
                parts.push(s_back);
            }
        }
        let lifted = tape.concat_cols(&parts);
        let stop_tok = tape.gather_rows(seq, &[0]);
        Ok((lifted, stop_tok))
    }

    /// History branch: fuse attachment states with node features for the
    /// visited-or-replayed subset, encode with self-attention, and lift to
    /// [stop ++ order] with the learned abstention scalar elsewhere.
    pub fn history_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &GraphView,
    ) -> (NodeId, NodeId) {
        // membership: visited/current nodes and nodes with attachments
        let members: Vec<usize> = (0..view.order.len())
            .filter(|&i| {
                matches!(
                    view.cats[i],
                    NodeCategory::Visited | NodeCategory::Current
                ) || !view.attachments[i].is_empty()
            })
            .collect();

        let mut u_rows: Vec<NodeId> = Vec::with_capacity(members.len() + 1);
        u_rows.push(tape.param(store, "nav.hist.stop"));
        for &i in &members {
            let x = tape.constant_row(&view.feats[i]);
            let x_emb = dense(tape, store, "nav.hist.obs_proj", x);
            if view.attachments[i].is_empty() {
                u_rows.push(x_emb);
            } else {
                let states: Vec<NodeId> = view.attachments[i]
                    .iter()
                    .map(|(s, _)| tape.constant_row(s))
                    .collect();
                let z = tape.concat_rows(&states); // N x state_dim
                let scores: Vec<f64> = view.attachments[i]
                    .iter()
                    .map(|&(_, c)| c / self.cfg.zeta)
                    .collect();
                let c = tape.constant_row(&scores);
                let w = tape.softmax_rows(c); // 1 x N
                let fused = tape.matmul(w, z); // 1 x state_dim
                let fused_emb = dense(tape, store, "nav.hist.state_proj", fused);
                u_rows.push(tape.add(fused_emb, x_emb));
            }
        }
        let seq = tape.concat_rows(&u_rows);
        let att = {
            let wq = tape.param(store, "nav.hist.attn.wq");
            let wk = tape.param(store, "nav.hist.attn.wk");
            let wv = tape.param(store, "nav.hist.attn.wv");
            let q = tape.matmul(seq, wq);
            let k = tape.matmul(seq, wk);
            let v = tape.matmul(seq, wv);
            attention_nodes(tape, q, k, v, None)
        };
        let seq = tape.add(seq, att);
        let seq = self.ffn_residual(tape, store, "nav.hist.ffn", seq);
        let scores_col = dense(tape, store, "nav.hist.score", seq);
        let member_scores = tape.transpose(scores_col); // 1 x (m+1)

        // lift: members get their score, everything else the learned s0
        let s0 = tape.param(store, "nav.hist.s0");
        let member_pos: BTreeMap<usize, usize> = members
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, k + 1))
            .collect();
        let mut parts: Vec<NodeId> = Vec::with_capacity(view.order.len() + 1);
        let stop_score = tape.gather_cols(member_scores, &[0]);
        parts.push(stop_score);
        for i in 0..view.order.len() {
            match member_pos.get(&i) {
                Some(&k) => parts.push(tape.gather_cols(member_scores, &[k])),
                None => parts.push(s0),
            }
        }
        let lifted = tape.concat_cols(&parts);
        let stop_tok = tape.gather_rows(seq, &[0]);
        (lifted, stop_tok)
    }

    /// Dynamic fusion: softmax weights from the three encoded stop tokens,
    /// then the weighted branch sum over [stop ++ order], masked down to the
    /// candidate list (current node removed).
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &GraphView,
        fine_tok: NodeId,
        coarse_tok: NodeId,
        hist_tok: NodeId,
        fine_row: NodeId,
        coarse_row: NodeId,
        hist_row: NodeId,
    ) -> DecisionNodes {
        let cat = tape.concat_cols(&[fine_tok, coarse_tok, hist_tok]);
        let hid_pre = dense(tape, store, "nav.fuse.fc", cat);
        let hid = tape.tanh(hid_pre);
        let logits = dense(tape, store, "nav.fuse.out", hid);
        let sigma = tape.softmax_rows(logits); // [sigma_f, sigma_c, sigma_h]

        let s_f = tape.gather_cols(sigma, &[0]);
        let s_c = tape.gather_cols(sigma, &[1]);
        let s_h = tape.gather_cols(sigma, &[2]);
        let wf = tape.mul_scalar_node(fine_row, s_f);
        let wc = tape.mul_scalar_node(coarse_row, s_c);
        let wh = tape.mul_scalar_node(hist_row, s_h);
        let sum_fc = tape.add(wf, wc);
        let full = tape.add(sum_fc, wh); // 1 x (n+1) over [stop ++ order]

        // candidate columns: stop plus every node except current
        let mut cols = vec![0usize];
        for (i, &v) in view.order.iter().enumerate() {
            if v != view.current {
                cols.push(i + 1);
            }
        }
        let final_scores = tape.gather_cols(full, &cols);
        let coarse = tape.gather_cols(coarse_row, &cols);
        let fine = tape.gather_cols(fine_row, &cols);
        let history = tape.gather_cols(hist_row, &cols);
        DecisionNodes {
            candidates: view.candidates(),
            coarse,
            fine,
            history,
            sigma,
            final_scores,
        }
    }

    /// Full decision computation for one step.
    pub fn decide(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &GraphView,
        obs: &Observation,
        instr: &[f64],
    ) -> Result<DecisionNodes, NavError> {
        let (coarse_row, coarse_tok) = self.coarse_scores(tape, store, view, instr);
        let (fine_row, fine_tok) = self.fine_scores(tape, store, view, obs, instr)?;
        let (hist_row, hist_tok) = self.history_scores(tape, store, view);
        Ok(self.fuse(
            tape, store, view, fine_tok, coarse_tok, hist_tok, fine_row, coarse_row, hist_row,
        ))
    }
}

/// Argmax with a deterministic tie-break: candidates are ordered stop-first
/// then ascending node id, and the earliest maximal entry wins.
pub fn select_action(candidates: &[ActionTarget], scores: &[f64]) -> ActionTarget {
    assert_eq!(candidates.len(), scores.len());
    assert!(!candidates.is_empty());
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    candidates[best]
}

pub(crate) fn softmax_values(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    crate::tensor::softmax_into(row, &mut out);
    out
}

pub(crate) fn nll_of(tape: &mut Tape, final_scores: NodeId, target: usize) -> NodeId {
    let lse = tape.logsumexp_rows(final_scores);
    let tgt = tape.gather_cols(final_scores, &[target]);
    tape.sub(lse, tgt)
}

pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    logsumexp(xs)
}

mod runner;
mod train;

pub use runner::{
    navigate_episode, EpisodeOpts, EpisodeTrace, HistTraceLog, StepLog, TourBanks,
};
pub use train::{train_imitation, ImitationOpts};
