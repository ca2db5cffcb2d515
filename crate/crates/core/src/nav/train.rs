//! Behavior cloning over tours: run the navigation loop with teacher
//! forcing, supervising each decision's fused scores against the expert's
//! next hop with a cross-entropy loss. Memory persists across the episodes
//! of a tour during training, exactly as at evaluation time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{env_step, expert_action, observe, Action, SceneGraph, Tour};
use crate::memory::EpisodicGraph;
use crate::tensor::{ParamStore, Tape};
use crate::world::{ElboNoise, LatentState, StepMode, TrajectorySample, WorldModel};

use super::runner::{EpisodeOpts, TourBanks};
use super::{nll_of, select_action, ActionTarget, GraphView, NavError, NavMode, NavModel};

#[derive(Debug, Clone)]
pub struct ImitationOpts {
    /// Passes over the full tour list.
    pub passes: usize,
    pub lr: f64,
    pub seed: u64,
    /// Memory mode active while training.
    pub mode: NavMode,
    /// When false, the episode's world-model objective is added to the
    /// cross-entropy loss so the world model keeps adapting.
    pub freeze_world_model: bool,
    /// Follow the expert after each supervised decision. When false the
    /// agent follows its own argmax (expert labels still supervise).
    pub teacher_forcing: bool,
    pub t_max: usize,
    pub retrieval: crate::memory::RetrievalConfig,
}

impl Default for ImitationOpts {
    fn default() -> Self {
        ImitationOpts {
            passes: 6,
            lr: 1e-3,
            seed: 0,
            mode: NavMode::Memoir,
            freeze_world_model: true,
            teacher_forcing: true,
            t_max: 15,
            retrieval: crate::memory::RetrievalConfig::default(),
        }
    }
}

/// Clone the expert over every tour. Returns the per-pass top-1 agreement
/// between the policy argmax and the expert action.
pub fn train_imitation(
    data: &[(SceneGraph, Tour)],
    wm: &WorldModel,
    nav: &NavModel,
    store: &mut ParamStore,
    opts: &ImitationOpts,
) -> Result<Vec<f64>, NavError> {
    if data.is_empty() {
        return Err(NavError::BadConfig("no training tours".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ IMITATION_SALT);
    let mut curve = Vec::with_capacity(opts.passes);
    for pass in 0..opts.passes {
        let mut agree = 0usize;
        let mut total = 0usize;
        for (tour_idx, (scene, tour)) in data.iter().enumerate() {
            let mut banks = TourBanks::new();
            for (ep_idx, episode) in tour.episodes.iter().enumerate() {
                let ep_opts = EpisodeOpts {
                    mode: opts.mode,
                    t_max: opts.t_max,
                    retrieval: opts.retrieval.clone(),
                    seed: opts
                        .seed
                        .wrapping_add((pass as u64) << 40)
                        .wrapping_add((tour_idx as u64) << 20)
                        .wrapping_add(ep_idx as u64),
                };
                let stats = train_episode(
                    scene, episode, ep_idx, &mut banks, wm, nav, store, &ep_opts, opts, &mut rng,
                )
                .map_err(|e| match e {
                    NavError::Tensor(source) => NavError::Diverged {
                        pass,
                        episode: ep_idx,
                        source,
                    },
                    other => other,
                })?;
                agree += stats.0;
                total += stats.1;
            }
        }
        curve.push(agree as f64 / total.max(1) as f64);
    }
    Ok(curve)
}

const IMITATION_SALT: u64 = 0x11AA_22BB_33CC_44DD;

/// One training episode with per-episode parameter update. Returns
/// (argmax-agreement count, decision count).
#[allow(clippy::too_many_arguments)]
fn train_episode(
    scene: &SceneGraph,
    episode: &crate::env::Episode,
    episode_index: usize,
    banks: &mut TourBanks,
    wm: &WorldModel,
    nav: &NavModel,
    store: &mut ParamStore,
    ep_opts: &EpisodeOpts,
    opts: &ImitationOpts,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), NavError> {
    let mut episodic = EpisodicGraph::new(scene.feat_dim);
    let mut cur = episode.start;
    let mut obs = observe(scene, cur);
    let mut prev_state = wm.initial_state();
    let mut mode_rng = ChaCha8Rng::seed_from_u64(ep_opts.seed);

    let mut tape = Tape::new();
    let mut step_losses = Vec::new();
    let mut agree = 0usize;
    let mut total = 0usize;
    // world-model trajectory material for joint training
    let mut traj_obs: Vec<Vec<f64>> = Vec::new();
    let mut traj_gammas: Vec<f64> = Vec::new();

    for _step in 0..ep_opts.t_max {
        super::runner::map_current(&mut episodic, banks, scene, cur, &obs);
        let state = wm.infer(
            store,
            &prev_state,
            &obs.pooled,
            &episode.instruction,
            StepMode::Deterministic,
        )?;
        let tau = wm.imagine(store, &state, StepMode::Deterministic)?;
        super::runner::apply_mode_retrieval(
            ep_opts,
            wm,
            store,
            banks,
            &mut episodic,
            cur,
            &tau,
            episode,
            &mut mode_rng,
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
        let decision = nav.decide(&mut tape, store, &view, &obs, &episode.instruction)?;

        let expert = expert_action(scene, cur, episode.goal, rng);
        let target_action = match expert {
            Action::Stop => ActionTarget::Stop,
            Action::MoveTo(v) => ActionTarget::Node(v),
        };
        let target_idx = decision
            .candidates
            .iter()
            .position(|&c| c == target_action)
            .expect("expert action is always a candidate");
        step_losses.push(nll_of(&mut tape, decision.final_scores, target_idx));

        let final_scores = tape.value(decision.final_scores).data.clone();
        let chosen = select_action(&decision.candidates, &final_scores);
        if chosen == target_action {
            agree += 1;
        }
        total += 1;

        traj_obs.push(obs.pooled.clone());
        let executed = if opts.teacher_forcing { target_action } else { chosen };
        match executed {
            ActionTarget::Stop => {
                traj_gammas.push(0.0);
                break;
            }
            ActionTarget::Node(v) => {
                let hop_path = if scene.edge_len(cur, v).is_some() {
                    vec![cur, v]
                } else {
                    banks
                        .persistent
                        .shortest_path(cur, v)
                        .ok_or(NavError::Unreachable { from: cur, to: v })?
                };
                let mut gamma = 0.0;
                for (k, &hop) in hop_path.iter().enumerate().skip(1) {
                    let (new_obs, new_vp, g) =
                        env_step(scene, cur, Action::MoveTo(hop), episode.goal)?;
                    cur = new_vp;
                    obs = new_obs;
                    gamma = g;
                    if k + 1 < hop_path.len() {
                        super::runner::map_current(
                            &mut episodic,
                            banks,
                            scene,
                            cur,
                            &obs,
                        );
                    }
                }
                traj_gammas.push(gamma);
            }
        }
        prev_state = state;
    }

    if step_losses.is_empty() {
        return Ok((agree, total));
    }
    let mut loss = step_losses[0];
    for &l in &step_losses[1..] {
        loss = tape.add(loss, l);
    }
    loss = tape.scale(loss, 1.0 / step_losses.len() as f64);

    if !opts.freeze_world_model && traj_obs.len() >= 2 {
        let traj = TrajectorySample {
            instruction: episode.instruction.clone(),
            observations: traj_obs,
            gammas: traj_gammas,
        };
        let batch = vec![traj];
        let lens = vec![batch[0].observations.len()];
        let noise = ElboNoise::draw(rng, &lens, wm.cfg.z_dim, wm.cfg.max_horizon);
        let (wm_loss, _) = wm.elbo_overshoot_loss(&mut tape, store, &batch, &noise)?;
        loss = tape.add(loss, wm_loss);
    }

    let grads = tape.grad(loss)?;
    if opts.freeze_world_model {
        let nav_only: std::collections::BTreeMap<String, crate::tensor::Mat> = grads
            .into_iter()
            .filter(|(name, _)| name.starts_with("nav."))
            .collect();
        store.adam_step(&nav_only, opts.lr);
    } else {
        store.adam_step(&grads, opts.lr);
    }
    Ok((agree, total))
}
