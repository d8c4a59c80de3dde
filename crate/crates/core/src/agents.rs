//! Agents on top of the world model: a manager that picks abstract goals
//! every k steps (score-function gradients over categorical codes), a
//! goal-conditioned worker trained on a goal-matching intrinsic reward
//! (pathwise gradients through imagination), a flat actor-critic
//! baseline, an ensemble-disagreement exploration bonus, and the shared
//! lambda-return actor-critic trainer.
//!
//! Group prefixes: manager `mgr.pi.` / `mgr.v.`, exploration ensemble
//! `mgr.ens.`, worker `wrk.pi.` / `wrk.v.`, flat `flat.pi.` / `flat.v.`.

use std::cell::Cell;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::HgcpError;
use crate::goalvae::{GoalCode, GoalVae};
use crate::numerics::{AdamConfig, Grads, Graph, Mlp, NodeId, ParamStore};
use crate::worldmodel::{ModelState, WorldModel};
use crate::Result;

/// Number of one-step predictors in the exploration ensemble.
pub const ENSEMBLE_SIZE: usize = 4;

/// Which policy architecture an agent runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Hierarchical,
    Flat,
}

/// Agent hyperparameters. `goal_horizon` is the number of environment
/// steps between manager decisions.
#[derive(Debug, Clone, Copy)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub goal_horizon: usize,
    pub action_repeat: usize,
    pub imagination_horizon: usize,
    pub discount: f64,
    pub lambda: f64,
    pub entropy_weight: f64,
    pub exploration_weight: f64,
    pub lr: f64,
}

impl AgentConfig {
    pub fn hierarchical() -> AgentConfig {
        AgentConfig {
            kind: AgentKind::Hierarchical,
            goal_horizon: 8,
            action_repeat: 1,
            imagination_horizon: 15,
            discount: 0.99,
            lambda: 0.95,
            entropy_weight: 3e-4,
            exploration_weight: 0.1,
            lr: 1e-3,
        }
    }

    pub fn flat() -> AgentConfig {
        AgentConfig {
            kind: AgentKind::Flat,
            goal_horizon: 1,
            action_repeat: 2,
            ..AgentConfig::hierarchical()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.goal_horizon < 1 {
            return Err(HgcpError::Config("goal_horizon must be >= 1".into()));
        }
        if self.action_repeat < 1 {
            return Err(HgcpError::Config("action_repeat must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(HgcpError::Config(format!("discount {} outside [0,1)", self.discount)));
        }
        Ok(())
    }
}

/// Number of abstract decisions covering a horizon of `h` steps with one
/// decision every `k` steps: ceil(h / k).
pub fn effective_horizon(h: usize, k: usize) -> usize {
    assert!(h >= 1 && k >= 1, "effective_horizon needs h >= 1 and k >= 1");
    h.div_ceil(k)
}

/// Distinct policy decisions made over an episode of `len` steps when
/// every action is held for `action_repeat` steps.
pub fn repeat_decisions(len: usize, action_repeat: usize) -> usize {
    assert!(action_repeat >= 1, "action_repeat must be >= 1");
    len.div_ceil(action_repeat)
}

/// All policy heads. Parameters live in a [`ParamStore`]; this struct
/// only carries the network shapes.
pub struct Policies {
    pub h_dim: usize,
    pub z_dim: usize,
    pub goal_k: usize,
    pub goal_c: usize,
    mgr_pi: Mlp,
    mgr_v: Mlp,
    wrk_pi: Mlp,
    wrk_v: Mlp,
    flat_pi: Mlp,
    flat_v: Mlp,
    ens: Vec<Mlp>,
    manager_decisions: Cell<u64>,
    mgr_norm: RetNorm,
    wrk_norm: RetNorm,
    flat_norm: RetNorm,
}

/// Loss report from one actor-critic update.
#[derive(Debug, Clone, Copy)]
pub struct AcLosses {
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub mean_return: f64,
}

/// An imagined rollout prepared for the actor-critic trainer, as nodes in
/// a live graph. `values[t]` is the critic on state t (length H+1, each
/// b x 1); `rewards[t]` is the reward entering state t+1 (length H).
pub struct Rollout {
    pub values: Vec<NodeId>,
    pub rewards: Vec<NodeId>,
    /// Critic input features per state, for the regression pass (each b x feat).
    pub feats: Vec<NodeId>,
}

/// How the actor receives credit.
pub enum Credit {
    /// Reparameterized pathwise gradients: the actor loss is the negated
    /// mean lambda-return, differentiated through rewards and values.
    Pathwise,
    /// Score-function with the critic as baseline: `logprobs[t]` (b x 1)
    /// must cover each decision step t in 0..H.
    ScoreFunction { logprobs: Vec<NodeId> },
}

/// Return-scale tracker for the actor objective: an exponential moving
/// average of the 5th-95th percentile range of lambda-returns. The actor
/// gradient is divided by max(1, ema), so small returns pass through at
/// full strength while large return scales cannot blow the policy mean
/// into tanh saturation. Critic targets stay unnormalized.
#[derive(Debug)]
pub struct RetNorm {
    ema: Cell<f64>,
    primed: Cell<bool>,
}

impl RetNorm {
    const DECAY: f64 = 0.99;

    pub fn new() -> RetNorm {
        RetNorm { ema: Cell::new(0.0), primed: Cell::new(false) }
    }

    /// Fold one batch of return samples into the moving range estimate and
    /// yield the divisor to scale the actor objective by.
    pub fn update(&self, samples: &mut [f64]) -> f64 {
        if !samples.is_empty() {
            samples.sort_by(|a, b| a.total_cmp(b));
            let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
            let range = pick(0.95) - pick(0.05);
            if self.primed.get() {
                let ema = Self::DECAY * self.ema.get() + (1.0 - Self::DECAY) * range;
                self.ema.set(ema);
            } else {
                self.ema.set(range);
                self.primed.set(true);
            }
        }
        self.ema.get().max(1.0)
    }
}

impl Default for RetNorm {
    fn default() -> RetNorm {
        RetNorm::new()
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn filter_grads(grads: &Grads, prefix: &str) -> Grads {
    Grads(
        grads
            .0
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, g)| (name.clone(), g.clone()))
            .collect(),
    )
}

/// Magnitude-aware cosine between a latent state and a goal vector:
/// cos(h, g) * |g| / max(|h|, |g|). 1 exactly when h = g != 0; 0 when
/// either vector is zero.
pub fn worker_intrinsic_reward(h: &[f64], goal: &[f64]) -> f64 {
    let dot: f64 = h.iter().zip(goal.iter()).map(|(a, b)| a * b).sum();
    let nh = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = goal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nh == 0.0 || ng == 0.0 {
        return 0.0;
    }
    dot / (nh * nh.max(ng))
}

/// Shared lambda-return actor-critic update inside a live graph. Computes
/// G_H = V_H and G_t = r_{t+1} + discount * ((1 - lambda) V_{t+1} +
/// lambda G_{t+1}); trains the actor on the negated mean return (pathwise)
/// or on logprob-weighted advantages (score-function), scaled by the
/// tracked return range in `norm`, plus an entropy bonus, applying only
/// gradients under `actor_prefix`; then regresses the critic on the
/// frozen (unnormalized) targets in a separate graph, applying only
/// gradients under `critic_prefix`.
#[allow(clippy::too_many_arguments)]
pub fn train_actor_critic(
    g: &mut Graph,
    store: &mut ParamStore,
    critic: &Mlp,
    rollout: &Rollout,
    credit: &Credit,
    entropy: NodeId,
    norm: &RetNorm,
    actor_prefix: &str,
    critic_prefix: &str,
    cfg: &AgentConfig,
) -> Result<AcLosses> {
    let horizon = rollout.rewards.len();
    if horizon < 2 {
        return Err(HgcpError::InsufficientHorizon(horizon));
    }
    assert_eq!(rollout.values.len(), horizon + 1, "values must cover H+1 states");
    assert_eq!(rollout.feats.len(), horizon + 1, "feats must cover H+1 states");

    // Lambda-returns, built backward.
    let mut returns = vec![rollout.values[horizon]; horizon + 1];
    for t in (0..horizon).rev() {
        let boot = g.scale(rollout.values[t + 1], 1.0 - cfg.lambda);
        let tail = g.scale(returns[t + 1], cfg.lambda);
        let mix = g.add(boot, tail);
        let disc = g.scale(mix, cfg.discount);
        returns[t] = g.add(rollout.rewards[t], disc);
    }
    let per_step: Vec<NodeId> = (0..horizon).map(|t| g.mean_all(returns[t])).collect();
    let mean_return = mean_of(g, &per_step);

    let target_vals: Vec<Vec<f64>> =
        returns[0..horizon].iter().map(|&r| g.value(r).to_vec()).collect();
    let mut samples: Vec<f64> = target_vals.iter().flatten().copied().collect();
    let scale = norm.update(&mut samples);

    let objective = match credit {
        Credit::Pathwise => mean_return,
        Credit::ScoreFunction { logprobs } => {
            assert_eq!(logprobs.len(), horizon, "one logprob per decision step");
            let mut terms = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let adv = g.sub(returns[t], rollout.values[t]);
                let adv = g.detach(adv);
                let weighted = g.mul(logprobs[t], adv);
                terms.push(g.mean_all(weighted));
            }
            mean_of(g, &terms)
        }
    };
    let neg_obj = g.scale(objective, -1.0 / scale);
    let ent_term = g.scale(entropy, -cfg.entropy_weight);
    let actor_loss = g.add(neg_obj, ent_term);

    let mean_return_v = g.scalar(mean_return)?;
    let entropy_v = g.scalar(entropy)?;
    let actor_v = g.scalar(actor_loss)?;
    let feat_vals: Vec<Vec<f64>> = rollout.feats[0..horizon].iter().map(|&f| g.value(f).to_vec()).collect();
    let (rows, feat_dim) = (g.rows(rollout.feats[0]), g.cols(rollout.feats[0]));

    let grads = g.backward(actor_loss)?;
    store.apply_update(&filter_grads(&grads, actor_prefix), AdamConfig::with_lr(cfg.lr))?;

    // Critic regression on stopped-gradient targets over detached states.
    let mut cg = Graph::new();
    let mut losses = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = cg.constant(rows, feat_dim, feat_vals[t].clone());
        let v = critic.forward(&mut cg, store, x);
        let tgt = cg.constant(rows, 1, target_vals[t].clone());
        let d = cg.sub(v, tgt);
        let d2 = cg.square(d);
        losses.push(cg.mean_all(d2));
    }
    let critic_loss = mean_of(&mut cg, &losses);
    let critic_v = cg.scalar(critic_loss)?;
    let cgrads = cg.backward(critic_loss)?;
    store.apply_update(&filter_grads(&cgrads, critic_prefix), AdamConfig::with_lr(cfg.lr))?;

    Ok(AcLosses {
        actor: actor_v,
        critic: critic_v,
        entropy: entropy_v,
        mean_return: mean_return_v,
    })
}

impl Policies {
    pub fn register(
        store: &mut ParamStore,
        h_dim: usize,
        z_dim: usize,
        goal_k: usize,
        goal_c: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Policies> {
        let s = h_dim + z_dim;
        let mgr_pi = Mlp::register(store, "mgr.pi", &[s, hidden, goal_k * goal_c], rng)?;
        let mgr_v = Mlp::register(store, "mgr.v", &[s, hidden, 1], rng)?;
        let wrk_pi = Mlp::register(store, "wrk.pi", &[s + h_dim, hidden, 2], rng)?;
        store.register("wrk.pi.logstd", vec![0.0; 2], true)?;
        let wrk_v = Mlp::register(store, "wrk.v", &[s + h_dim, hidden, 1], rng)?;
        let flat_pi = Mlp::register(store, "flat.pi", &[s, hidden, 2], rng)?;
        store.register("flat.pi.logstd", vec![0.0; 2], true)?;
        let flat_v = Mlp::register(store, "flat.v", &[s, hidden, 1], rng)?;
        let ens = (0..ENSEMBLE_SIZE)
            .map(|i| Mlp::register(store, &format!("mgr.ens.{i}"), &[s, 32, h_dim], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Policies {
            h_dim,
            z_dim,
            goal_k,
            goal_c,
            mgr_pi,
            mgr_v,
            wrk_pi,
            wrk_v,
            flat_pi,
            flat_v,
            ens,
            manager_decisions: Cell::new(0),
            mgr_norm: RetNorm::new(),
            wrk_norm: RetNorm::new(),
            flat_norm: RetNorm::new(),
        })
    }

    /// Rebuild handles over parameters already in a store.
    pub fn attach(h_dim: usize, z_dim: usize, goal_k: usize, goal_c: usize, hidden: usize) -> Policies {
        let s = h_dim + z_dim;
        Policies {
            h_dim,
            z_dim,
            goal_k,
            goal_c,
            mgr_pi: Mlp::attach("mgr.pi", &[s, hidden, goal_k * goal_c]),
            mgr_v: Mlp::attach("mgr.v", &[s, hidden, 1]),
            wrk_pi: Mlp::attach("wrk.pi", &[s + h_dim, hidden, 2]),
            wrk_v: Mlp::attach("wrk.v", &[s + h_dim, hidden, 1]),
            flat_pi: Mlp::attach("flat.pi", &[s, hidden, 2]),
            flat_v: Mlp::attach("flat.v", &[s, hidden, 1]),
            ens: (0..ENSEMBLE_SIZE)
                .map(|i| Mlp::attach(&format!("mgr.ens.{i}"), &[s, 32, h_dim]))
                .collect(),
            manager_decisions: Cell::new(0),
            mgr_norm: RetNorm::new(),
            wrk_norm: RetNorm::new(),
            flat_norm: RetNorm::new(),
        }
    }

    /// How many manager decisions have been taken (instrumentation).
    pub fn manager_decision_count(&self) -> u64 {
        self.manager_decisions.get()
    }

    fn state_feat(&self, g: &mut Graph, state: &ModelState) -> NodeId {
        let h = g.constant(1, self.h_dim, state.h.clone());
        let z = g.constant(1, self.z_dim, state.z.clone());
        g.concat(&[h, z])
    }

    /// Manager decision schedule: at steps divisible by k, sample a goal
    /// code from the manager policy and decode it; otherwise the current
    /// goal carries over unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn manager_act(
        &self,
        store: &ParamStore,
        vae: &GoalVae,
        state: &ModelState,
        step: usize,
        k: usize,
        current_goal: Option<&[f64]>,
        greedy: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if step % k != 0 {
            return match current_goal {
                Some(goal) => Ok(goal.to_vec()),
                None => Err(HgcpError::Protocol(format!(
                    "no current goal at step {step} (next decision at step {})",
                    (step / k + 1) * k
                ))),
            };
        }
        self.manager_decisions.set(self.manager_decisions.get() + 1);
        let mut g = Graph::new();
        let feat = self.state_feat(&mut g, state);
        let logits = self.mgr_pi.forward(&mut g, store, feat);
        let onehot = g.one_hot_st(logits, self.goal_c, greedy, rng);
        let code = GoalCode {
            k: self.goal_k,
            c: self.goal_c,
            data: g.value(onehot).to_vec(),
        };
        vae.decode(store, &code)
    }

    /// Tanh-squashed Gaussian worker action; deterministic mean in eval
    /// mode. Components are always inside (-1, 1).
    pub fn worker_act(
        &self,
        store: &ParamStore,
        state: &ModelState,
        goal: &[f64],
        eval_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> [f64; 2] {
        assert_eq!(goal.len(), self.h_dim, "goal dim must match h dim");
        let mut g = Graph::new();
        let feat = self.state_feat(&mut g, state);
        let gl = g.constant(1, self.h_dim, goal.to_vec());
        let x = g.concat(&[feat, gl]);
        let mean_raw = self.wrk_pi.forward(&mut g, store, x);
        sample_squashed(&mut g, store, mean_raw, "wrk.pi.logstd", eval_mode, rng)
    }

    /// Tanh-squashed Gaussian flat action; deterministic mean in eval mode.
    pub fn flat_act(
        &self,
        store: &ParamStore,
        state: &ModelState,
        eval_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> [f64; 2] {
        let mut g = Graph::new();
        let feat = self.state_feat(&mut g, state);
        let mean_raw = self.flat_pi.forward(&mut g, store, feat);
        sample_squashed(&mut g, store, mean_raw, "flat.pi.logstd", eval_mode, rng)
    }

    /// Ensemble-disagreement novelty of a state: per-dimension variance of
    /// the ensemble's next-h predictions, averaged over dimensions.
    pub fn exploration_reward(&self, store: &ParamStore, state: &ModelState) -> f64 {
        let mut g = Graph::new();
        let feat = self.state_feat(&mut g, state);
        let var = self.disagreement_node(&mut g, store, feat);
        g.value(var)[0]
    }

    /// In-graph ensemble disagreement (b x 1) from a (b x (h+z)) feature node.
    fn disagreement_node(&self, g: &mut Graph, store: &ParamStore, feat: NodeId) -> NodeId {
        let preds: Vec<NodeId> = self.ens.iter().map(|m| m.forward(g, store, feat)).collect();
        let mean = mean_of(g, &preds);
        let sq: Vec<NodeId> = preds
            .iter()
            .map(|&p| {
                let d = g.sub(p, mean);
                g.square(d)
            })
            .collect();
        let var = mean_of(g, &sq);
        let s = g.sum_cols(var);
        g.scale(s, 1.0 / self.h_dim as f64)
    }

    /// One regression step of the exploration ensemble toward observed
    /// next deterministic states. Touches only `mgr.ens.` groups.
    pub fn train_ensemble(
        &self,
        store: &mut ParamStore,
        states: &[ModelState],
        next_h: &[Vec<f64>],
        lr: f64,
    ) -> Result<f64> {
        if states.is_empty() {
            return Err(HgcpError::EmptyBatch);
        }
        assert_eq!(states.len(), next_h.len(), "one target per state");
        let b = states.len();
        let feat_vals: Vec<f64> = states
            .iter()
            .flat_map(|s| s.h.iter().chain(s.z.iter()).copied())
            .collect();
        let tgt_vals: Vec<f64> = next_h.iter().flat_map(|h| h.iter().copied()).collect();
        let mut g = Graph::new();
        let feat = g.constant(b, self.h_dim + self.z_dim, feat_vals);
        let tgt = g.constant(b, self.h_dim, tgt_vals);
        let losses: Vec<NodeId> = self
            .ens
            .iter()
            .map(|m| {
                let p = m.forward(&mut g, store, feat);
                let d = g.sub(p, tgt);
                let d2 = g.square(d);
                g.mean_all(d2)
            })
            .collect();
        let loss = mean_of(&mut g, &losses);
        let v = g.scalar(loss)?;
        let grads = g.backward(loss)?;
        store.apply_update(&filter_grads(&grads, "mgr.ens."), AdamConfig::with_lr(lr))?;
        Ok(v)
    }

    /// In-graph worker policy: tanh(mean + std * eps), reparameterized.
    fn worker_action_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        z: NodeId,
        goal: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let x = g.concat(&[h, z, goal]);
        let mean_raw = self.wrk_pi.forward(g, store, x);
        squashed_sample_node(g, store, mean_raw, "wrk.pi.logstd", rng)
    }

    /// Train the worker in imagination: pathwise gradients of the
    /// lambda-return of the goal-matching intrinsic reward. One goal per
    /// start state but held fixed across the horizon. Updates `wrk.pi.`
    /// and `wrk.v.` only.
    pub fn train_worker(
        &self,
        store: &mut ParamStore,
        wm: &WorldModel,
        cfg: &AgentConfig,
        starts: &[ModelState],
        goals: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<AcLosses> {
        if starts.is_empty() {
            return Err(HgcpError::EmptyBatch);
        }
        assert_eq!(starts.len(), goals.len(), "one goal per start state");
        let b = starts.len();
        let horizon = cfg.imagination_horizon;
        if horizon < 2 {
            return Err(HgcpError::InsufficientHorizon(horizon));
        }
        let mut g = Graph::new();
        let h0 = pack_states(&mut g, starts, |s| &s.h, self.h_dim);
        let z0 = pack_states(&mut g, starts, |s| &s.z, self.z_dim);
        let goal_vals: Vec<f64> = goals.iter().flat_map(|gv| gv.iter().copied()).collect();
        let goal = g.constant(b, self.h_dim, goal_vals);

        let mut act_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let roll = wm.imagine_graph(
            &mut g,
            store,
            h0,
            z0,
            horizon,
            |g, store, h, z, _| self.worker_action_node(g, store, h, z, goal, &mut act_rng),
            rng,
        );
        // Intrinsic rewards on entered states; values and feats on every state.
        let rewards: Vec<NodeId> = (1..=horizon)
            .map(|t| intrinsic_node(&mut g, roll.h[t], goal))
            .collect();
        let mut feats = Vec::with_capacity(horizon + 1);
        let mut values = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let f = g.concat(&[roll.h[t], roll.z[t], goal]);
            feats.push(f);
            values.push(self.wrk_v.forward(&mut g, store, f));
        }
        let entropy = gaussian_entropy_node(&mut g, store, "wrk.pi.logstd");
        let rollout = Rollout { values, rewards, feats };
        train_actor_critic(
            &mut g,
            store,
            &self.wrk_v,
            &rollout,
            &Credit::Pathwise,
            entropy,
            &self.wrk_norm,
            "wrk.pi.",
            "wrk.v.",
            cfg,
        )
    }

    /// Train the flat policy in imagination: pathwise gradients of the
    /// lambda-return of the predicted extrinsic reward. Updates `flat.pi.`
    /// and `flat.v.` only.
    pub fn train_flat(
        &self,
        store: &mut ParamStore,
        wm: &WorldModel,
        cfg: &AgentConfig,
        starts: &[ModelState],
        rng: &mut ChaCha8Rng,
    ) -> Result<AcLosses> {
        if starts.is_empty() {
            return Err(HgcpError::EmptyBatch);
        }
        let horizon = cfg.imagination_horizon;
        if horizon < 2 {
            return Err(HgcpError::InsufficientHorizon(horizon));
        }
        let mut g = Graph::new();
        let h0 = pack_states(&mut g, starts, |s| &s.h, self.h_dim);
        let z0 = pack_states(&mut g, starts, |s| &s.z, self.z_dim);
        let mut act_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let roll = wm.imagine_graph(
            &mut g,
            store,
            h0,
            z0,
            horizon,
            |g, store, h, z, _| {
                let x = g.concat(&[h, z]);
                let mean_raw = self.flat_pi.forward(g, store, x);
                squashed_sample_node(g, store, mean_raw, "flat.pi.logstd", rng)
            },
            &mut act_rng,
        );
        let mut feats = Vec::with_capacity(horizon + 1);
        let mut values = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let f = g.concat(&[roll.h[t], roll.z[t]]);
            feats.push(f);
            values.push(self.flat_v.forward(&mut g, store, f));
        }
        let entropy = gaussian_entropy_node(&mut g, store, "flat.pi.logstd");
        let rollout = Rollout { values, rewards: roll.rewards, feats };
        train_actor_critic(
            &mut g,
            store,
            &self.flat_v,
            &rollout,
            &Credit::Pathwise,
            entropy,
            &self.flat_norm,
            "flat.pi.",
            "flat.v.",
            cfg,
        )
    }

    /// Train the manager in imagination. The manager samples a code every
    /// `goal_horizon` imagined steps; the worker acts under the decoded
    /// goal in between. Each abstract step's reward is the k-block sum of
    /// predicted extrinsic rewards plus the weighted exploration bonus of
    /// the block's final state; credit is score-function with the manager
    /// critic as baseline. Updates `mgr.pi.` and `mgr.v.` only.
    pub fn train_manager(
        &self,
        store: &mut ParamStore,
        wm: &WorldModel,
        vae: &GoalVae,
        cfg: &AgentConfig,
        starts: &[ModelState],
        rng: &mut ChaCha8Rng,
    ) -> Result<AcLosses> {
        if starts.is_empty() {
            return Err(HgcpError::EmptyBatch);
        }
        let k = cfg.goal_horizon;
        let horizon = cfg.imagination_horizon;
        let abstract_h = effective_horizon(horizon, k);
        if abstract_h < 2 {
            return Err(HgcpError::InsufficientHorizon(abstract_h));
        }
        let mut g = Graph::new();
        let mut h = pack_states(&mut g, starts, |s| &s.h, self.h_dim);
        let mut z = pack_states(&mut g, starts, |s| &s.z, self.z_dim);

        let mut feats = Vec::with_capacity(abstract_h + 1);
        let mut values = Vec::with_capacity(abstract_h + 1);
        let mut rewards = Vec::with_capacity(abstract_h);
        let mut logprobs = Vec::with_capacity(abstract_h);
        let mut entropies = Vec::with_capacity(abstract_h);

        let mut t = 0usize;
        while t < horizon {
            // Abstract decision at the block start.
            let feat = g.concat(&[h, z]);
            feats.push(feat);
            values.push(self.mgr_v.forward(&mut g, store, feat));
            let logits = self.mgr_pi.forward(&mut g, store, feat);
            let sampled = g.one_hot_st(logits, self.goal_c, false, rng);
            let onehot = g.detach(sampled); // plain sample: no straight-through path
            let lsm = g.log_softmax(logits, self.goal_c);
            let picked = g.mul(lsm, onehot);
            logprobs.push(g.sum_cols(picked));
            entropies.push(categorical_entropy_node(&mut g, logits, self.goal_c, self.goal_k));
            let goal = vae.decode_node(&mut g, store, onehot);

            // Worker rolls the block out under the decoded goal.
            let block = k.min(horizon - t);
            let mut step_rewards = Vec::with_capacity(block);
            for _ in 0..block {
                let a = self.worker_action_node(&mut g, store, h, z, goal, rng);
                let h1 = wm.h_step(&mut g, store, h, z, a);
                let (qm, ql) = wm.prior_params(&mut g, store, h1, a);
                let z1 = WorldModel::gauss_sample(&mut g, qm, ql, true, rng);
                step_rewards.push(wm.reward_pred(&mut g, store, h1, z1));
                h = h1;
                z = z1;
            }
            let mut block_sum = step_rewards[0];
            for &r in &step_rewards[1..] {
                block_sum = g.add(block_sum, r);
            }
            let end_feat = g.concat(&[h, z]);
            let novelty = self.disagreement_node(&mut g, store, end_feat);
            let bonus = g.scale(novelty, cfg.exploration_weight);
            rewards.push(g.add(block_sum, bonus));
            t += block;
        }
        let final_feat = g.concat(&[h, z]);
        feats.push(final_feat);
        values.push(self.mgr_v.forward(&mut g, store, final_feat));

        let entropy = mean_of(&mut g, &entropies);
        let abstract_cfg = AgentConfig {
            discount: cfg.discount.powi(k as i32),
            ..cfg.clone()
        };
        let rollout = Rollout { values, rewards, feats };
        train_actor_critic(
            &mut g,
            store,
            &self.mgr_v,
            &rollout,
            &Credit::ScoreFunction { logprobs },
            entropy,
            &self.mgr_norm,
            "mgr.pi.",
            "mgr.v.",
            &abstract_cfg,
        )
    }
}

fn pack_states(
    g: &mut Graph,
    states: &[ModelState],
    sel: impl Fn(&ModelState) -> &Vec<f64>,
    dim: usize,
) -> NodeId {
    let vals: Vec<f64> = states.iter().flat_map(|s| sel(s).iter().copied()).collect();
    g.constant(states.len(), dim, vals)
}

/// In-graph magnitude-aware cosine between h rows and a constant goal.
fn intrinsic_node(g: &mut Graph, h: NodeId, goal: NodeId) -> NodeId {
    let rows = g.rows(h);
    let hg = g.mul(h, goal);
    let dot = g.sum_cols(hg);
    let h2 = g.square(h);
    let nh2 = g.sum_cols(h2);
    let nh = g.sqrt(nh2);
    let g2 = g.square(goal);
    let ng2 = g.sum_cols(g2);
    let ng = g.sqrt(ng2);
    let bigger = g.max(nh, ng);
    let denom = g.mul(nh, bigger);
    let tiny = g.constant(rows, 1, vec![1e-12; rows]);
    let safe = g.max(denom, tiny);
    g.div(dot, safe)
}

/// Bounded log-std from a raw parameter group, pulled as a (dim x 1)
/// column: -0.5 + 1.5 * tanh(raw), so sigma stays in (e^-2, e).
fn logstd_node(g: &mut Graph, store: &ParamStore, group: &str) -> NodeId {
    let dim = store
        .group(group)
        .unwrap_or_else(|| panic!("unknown log-std group `{group}`"))
        .values
        .len();
    let raw = g.param_matrix(store, group, dim, 1);
    let t = g.tanh(raw);
    g.affine_scalar(t, 1.5, -0.5)
}

/// In-graph reparameterized tanh-squashed sample around a (b x 2) mean.
fn squashed_sample_node(
    g: &mut Graph,
    store: &ParamStore,
    mean_raw: NodeId,
    logstd_group: &str,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let (rows, cols) = (g.rows(mean_raw), g.cols(mean_raw));
    let ls = logstd_node(g, store, logstd_group);
    let std_col = g.exp(ls); // cols x 1, affine weight layout (out x in)
    // Broadcast over the batch: ones (b x 1) through the (cols x 1) weight.
    let ones = g.constant(rows, 1, vec![1.0; rows]);
    let zero_bias = g.constant(1, cols, vec![0.0; cols]);
    let std = g.affine(ones, std_col, zero_bias);
    let eps_vals: Vec<f64> = (0..rows * cols)
        .map(|_| crate::numerics::standard_normal(rng))
        .collect();
    let eps = g.constant(rows, cols, eps_vals);
    let noise = g.mul(std, eps);
    let u = g.add(mean_raw, noise);
    g.tanh(u)
}

/// Value-level tanh-squashed action from a (1 x 2) mean node: the
/// deterministic mean in eval mode, a sampled action otherwise.
fn sample_squashed(
    g: &mut Graph,
    store: &ParamStore,
    mean_raw: NodeId,
    logstd_group: &str,
    eval_mode: bool,
    rng: &mut ChaCha8Rng,
) -> [f64; 2] {
    let out = if eval_mode {
        g.tanh(mean_raw)
    } else {
        squashed_sample_node(g, store, mean_raw, logstd_group, rng)
    };
    let v = g.value(out);
    [v[0], v[1]]
}

/// Entropy of the diagonal Gaussian with the bounded log-std of `group`:
/// sum_d logstd_d + D/2 * ln(2 pi e).
fn gaussian_entropy_node(g: &mut Graph, store: &ParamStore, group: &str) -> NodeId {
    let ls = logstd_node(g, store, group);
    let s = g.sum_all(ls);
    let d = store.group(group).map(|gr| gr.values.len()).unwrap_or(0) as f64;
    g.affine_scalar(s, 1.0, 0.5 * d * libm::log(2.0 * std::f64::consts::PI * std::f64::consts::E))
}

/// Mean categorical entropy over all rows and batch entries of a
/// (b x K*C) logits node.
fn categorical_entropy_node(g: &mut Graph, logits: NodeId, classes: usize, rows_per_sample: usize) -> NodeId {
    let p = g.softmax(logits, classes);
    let lp = g.log_softmax(logits, classes);
    let plogp = g.mul(p, lp);
    let s = g.sum_cols(plogp);
    let m = g.mean_all(s);
    g.scale(m, -1.0 / rows_per_sample as f64)
}
