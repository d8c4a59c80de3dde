//! Latent world model: a recurrent deterministic core with a Gaussian
//! stochastic latent, conditioned on pixels, proprioception, and the
//! previous extrinsic reward, plus reconstruction and reward heads and
//! imagination rollouts.
//!
//! Layout of one step: `h_t = GRU(h_{t-1}, [z_{t-1}, a_{t-1}])`; the
//! posterior reads `(h_t, obs_t)`, the prior reads `(h_t, a_{t-1})` only.
//! The reward head on a state predicts the reward received on *entering*
//! it, i.e. `obs_t.prev_reward`, which is what imagination needs to score
//! a transition. All parameters live under the group prefix `wm.`.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;

use crate::envs::Observation;
use crate::error::HgcpError;
use crate::numerics::{standard_normal, AdamConfig, Graph, GruCell, Mlp, NodeId, ParamStore};
use crate::Result;

/// Reward-loss weight in the total objective.
pub const BETA_R: f64 = 10.0;
/// KL weight in the total objective.
pub const BETA_KL: f64 = 1.0;
/// Free-bits floor, nats. The floor enters the reported loss; gradients
/// use the raw KL so prior and posterior keep tracking each other on data
/// whose information content sits below the floor.
pub const FREE_BITS: f64 = 1.0;
/// Default world-model learning rate.
pub const WM_LR: f64 = 1e-3;

/// One latent state as plain values (batch size 1).
#[derive(Debug, Clone)]
pub struct ModelState {
    /// Deterministic recurrent state.
    pub h: Vec<f64>,
    /// Stochastic latent sample.
    pub z: Vec<f64>,
    /// Posterior/prior mean the sample was drawn from.
    pub mean: Vec<f64>,
    /// Bounded log-std of that distribution.
    pub logstd: Vec<f64>,
}

impl ModelState {
    pub fn zeros(h_dim: usize, z_dim: usize) -> ModelState {
        ModelState {
            h: vec![0.0; h_dim],
            z: vec![0.0; z_dim],
            mean: vec![0.0; z_dim],
            logstd: vec![-1.5; z_dim],
        }
    }
}

/// Loss report for one world-model update. `total` is exactly
/// `recon + BETA_R * reward + BETA_KL * kl`, where `kl` is the floored
/// KL loss; `kl_raw` is the unfloored divergence.
#[derive(Debug, Clone, Copy)]
pub struct WMLosses {
    pub recon: f64,
    pub reward: f64,
    pub kl: f64,
    pub kl_raw: f64,
    pub total: f64,
}

/// A training batch: B subsequences of length L, step-major. `obs[j]` is
/// the flattened observation at step j (B x obs_dim, row-major) whose
/// last channel is the reward received on entering it; `prev_actions[j]`
/// is the action that led into step j (B x action_dim).
#[derive(Debug, Clone)]
pub struct WmBatch {
    pub b: usize,
    pub l: usize,
    pub obs: Vec<Vec<f64>>,
    pub prev_actions: Vec<Vec<f64>>,
}

/// Imagination rollout as graph nodes; index t runs over 0..=horizon for
/// states and 0..horizon for actions/rewards, with `rewards[t]` the
/// predicted reward entering state t+1.
pub struct ImaginedRollout {
    pub h: Vec<NodeId>,
    pub z: Vec<NodeId>,
    pub actions: Vec<NodeId>,
    pub rewards: Vec<NodeId>,
}

/// Imagination rollout as plain values: `states[t][i]` for start i at
/// step t (t = 0 is the start itself), `actions[t][i]`, and
/// `rewards[t][i]` the predicted reward entering `states[t+1][i]`.
#[derive(Debug, Clone)]
pub struct ImaginedTraj {
    pub states: Vec<Vec<ModelState>>,
    pub actions: Vec<Vec<[f64; 2]>>,
    pub rewards: Vec<Vec<f64>>,
}

/// The world model: sub-network handles plus dimensions. Parameters live
/// in a [`ParamStore`] under `wm.`.
pub struct WorldModel {
    pub h_dim: usize,
    pub z_dim: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    gru: GruCell,
    post: Mlp,
    prior: Mlp,
    dec: Mlp,
    rew: Mlp,
    posterior_encodes: Cell<u64>,
}

impl WorldModel {
    /// Register all sub-networks. `obs_dim` includes the trailing reward
    /// channel; reconstruction covers the first `obs_dim - 1` entries.
    pub fn register(
        store: &mut ParamStore,
        h_dim: usize,
        z_dim: usize,
        obs_dim: usize,
        action_dim: usize,
        enc_hidden: usize,
        dec_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<WorldModel> {
        let gru = GruCell::register(store, "wm.gru", z_dim + action_dim, h_dim, rng)?;
        let post = Mlp::register(store, "wm.post", &[h_dim + obs_dim, enc_hidden, 2 * z_dim], rng)?;
        let prior = Mlp::register(store, "wm.prior", &[h_dim + action_dim, 64, 2 * z_dim], rng)?;
        let dec = Mlp::register(store, "wm.dec", &[h_dim + z_dim, dec_hidden, obs_dim - 1], rng)?;
        let rew = Mlp::register(store, "wm.rew", &[h_dim + z_dim, 64, 1], rng)?;
        Ok(WorldModel {
            h_dim,
            z_dim,
            obs_dim,
            action_dim,
            gru,
            post,
            prior,
            dec,
            rew,
            posterior_encodes: Cell::new(0),
        })
    }

    /// Rebuild the handles for parameters already present in a store
    /// (e.g. after loading a checkpoint).
    pub fn attach(
        h_dim: usize,
        z_dim: usize,
        obs_dim: usize,
        action_dim: usize,
        enc_hidden: usize,
        dec_hidden: usize,
    ) -> WorldModel {
        WorldModel {
            h_dim,
            z_dim,
            obs_dim,
            action_dim,
            gru: GruCell::attach("wm.gru", z_dim + action_dim, h_dim),
            post: Mlp::attach("wm.post", &[h_dim + obs_dim, enc_hidden, 2 * z_dim]),
            prior: Mlp::attach("wm.prior", &[h_dim + action_dim, 64, 2 * z_dim]),
            dec: Mlp::attach("wm.dec", &[h_dim + z_dim, dec_hidden, obs_dim - 1]),
            rew: Mlp::attach("wm.rew", &[h_dim + z_dim, 64, 1]),
            posterior_encodes: Cell::new(0),
        }
    }

    /// How many observation-conditioned (posterior) encodes have run.
    /// Imagination must never advance this.
    pub fn posterior_encode_count(&self) -> u64 {
        self.posterior_encodes.get()
    }

    // ---- graph-level building blocks -------------------------------------

    /// Bounded log-std: -1.5 + 3.5 * tanh(raw), range (-5, 2) with the
    /// zero-weight output at the midpoint.
    fn squash_logstd(g: &mut Graph, raw: NodeId) -> NodeId {
        let t = g.tanh(raw);
        g.affine_scalar(t, 3.5, -1.5)
    }

    /// Split a (b x 2d) head output into (mean, bounded logstd).
    fn split_gauss(g: &mut Graph, out: NodeId, d: usize) -> (NodeId, NodeId) {
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        (mean, Self::squash_logstd(g, raw))
    }

    /// Reparameterized sample: mean + exp(logstd) * eps with eps drawn
    /// outside the graph, or the mean itself when `sample` is false.
    pub fn gauss_sample(
        g: &mut Graph,
        mean: NodeId,
        logstd: NodeId,
        sample: bool,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        if !sample {
            return mean;
        }
        let (rows, cols) = (g.rows(mean), g.cols(mean));
        let eps: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng)).collect();
        let eps = g.constant(rows, cols, eps);
        let std = g.exp(logstd);
        let noise = g.mul(std, eps);
        g.add(mean, noise)
    }

    /// Deterministic state advance: h' = GRU(h, [z, a]).
    pub fn h_step(&self, g: &mut Graph, store: &ParamStore, h: NodeId, z: NodeId, action: NodeId) -> NodeId {
        let za = g.concat(&[z, action]);
        self.gru.step(g, store, za, h)
    }

    /// Posterior parameters from (h, obs).
    pub fn posterior_params(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        obs: NodeId,
    ) -> (NodeId, NodeId) {
        let x = g.concat(&[h, obs]);
        let out = self.post.forward(g, store, x);
        Self::split_gauss(g, out, self.z_dim)
    }

    /// Prior parameters from (h, action) only — no observation access.
    pub fn prior_params(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        action: NodeId,
    ) -> (NodeId, NodeId) {
        let x = g.concat(&[h, action]);
        let out = self.prior.forward(g, store, x);
        Self::split_gauss(g, out, self.z_dim)
    }

    /// Reconstruction of the non-reward observation channels.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, h: NodeId, z: NodeId) -> NodeId {
        let x = g.concat(&[h, z]);
        self.dec.forward(g, store, x)
    }

    /// Predicted reward for entering the state (h, z).
    pub fn reward_pred(&self, g: &mut Graph, store: &ParamStore, h: NodeId, z: NodeId) -> NodeId {
        let x = g.concat(&[h, z]);
        self.rew.forward(g, store, x)
    }

    /// KL(p || q) for diagonal Gaussians, summed over dims: (b x 1).
    pub fn kl_diag(
        g: &mut Graph,
        mean_p: NodeId,
        logstd_p: NodeId,
        mean_q: NodeId,
        logstd_q: NodeId,
    ) -> NodeId {
        let t1 = g.sub(logstd_q, logstd_p);
        let two_lp = g.affine_scalar(logstd_p, 2.0, 0.0);
        let var_p = g.exp(two_lp);
        let two_lq = g.affine_scalar(logstd_q, 2.0, 0.0);
        let var_q = g.exp(two_lq);
        let dm = g.sub(mean_p, mean_q);
        let dm2 = g.square(dm);
        let num = g.add(var_p, dm2);
        let denom = g.affine_scalar(var_q, 2.0, 0.0);
        let t2 = g.div(num, denom);
        let s = g.add(t1, t2);
        let elem = g.affine_scalar(s, 1.0, -0.5);
        g.sum_cols(elem)
    }

    // ---- value-level operations ------------------------------------------

    /// Observation-conditioned state advance (the only place observations
    /// enter the model). Counts toward the posterior-encode counter.
    pub fn encode_posterior(
        &self,
        store: &ParamStore,
        prev: &ModelState,
        action: [f64; 2],
        obs: &Observation,
        sample: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelState> {
        self.posterior_encodes.set(self.posterior_encodes.get() + 1);
        let flat = obs.flat();
        if flat.len() != self.obs_dim {
            return Err(HgcpError::Shape(format!(
                "observation dim {} != model obs dim {}",
                flat.len(),
                self.obs_dim
            )));
        }
        let mut g = Graph::new();
        let h = g.constant(1, self.h_dim, prev.h.clone());
        let z = g.constant(1, self.z_dim, prev.z.clone());
        let a = g.constant(1, self.action_dim, action.to_vec());
        let o = g.constant(1, self.obs_dim, flat);
        let h1 = self.h_step(&mut g, store, h, z, a);
        let (mean, logstd) = self.posterior_params(&mut g, store, h1, o);
        let znew = Self::gauss_sample(&mut g, mean, logstd, sample, rng);
        if let Some(primitive) = g.is_poisoned() {
            return Err(HgcpError::NumericalDivergence { primitive });
        }
        Ok(ModelState {
            h: g.value(h1).to_vec(),
            z: g.value(znew).to_vec(),
            mean: g.value(mean).to_vec(),
            logstd: g.value(logstd).to_vec(),
        })
    }

    /// Prior distribution over the next z (and the next h), from the
    /// previous state and action only.
    pub fn dynamics_prior(
        &self,
        store: &ParamStore,
        prev: &ModelState,
        action: [f64; 2],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let h = g.constant(1, self.h_dim, prev.h.clone());
        let z = g.constant(1, self.z_dim, prev.z.clone());
        let a = g.constant(1, self.action_dim, action.to_vec());
        let h1 = self.h_step(&mut g, store, h, z, a);
        let (mean, logstd) = self.prior_params(&mut g, store, h1, a);
        (g.value(h1).to_vec(), g.value(mean).to_vec(), g.value(logstd).to_vec())
    }

    /// One world-model update on a batch of subsequences. Applies
    /// gradients to trainable `wm.` groups only and reports the losses.
    pub fn train_worldmodel(
        &self,
        store: &mut ParamStore,
        batch: &WmBatch,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<WMLosses> {
        if batch.b == 0 || batch.l == 0 {
            return Err(HgcpError::EmptyBatch);
        }
        let (b, l) = (batch.b, batch.l);
        let mut g = Graph::new();
        let mut h = g.constant(b, self.h_dim, vec![0.0; b * self.h_dim]);
        let mut z = g.constant(b, self.z_dim, vec![0.0; b * self.z_dim]);
        let mut recon_terms = Vec::with_capacity(l);
        let mut reward_terms = Vec::with_capacity(l);
        let mut kl_terms = Vec::with_capacity(l);
        for j in 0..l {
            let a = g.constant(b, self.action_dim, batch.prev_actions[j].clone());
            let obs = g.constant(b, self.obs_dim, batch.obs[j].clone());
            h = self.h_step(&mut g, store, h, z, a);
            let (pm, pl) = self.posterior_params(&mut g, store, h, obs);
            let (qm, ql) = self.prior_params(&mut g, store, h, a);
            z = Self::gauss_sample(&mut g, pm, pl, true, rng);

            let recon = self.decode(&mut g, store, h, z);
            let target = g.slice_cols(obs, 0, self.obs_dim - 1);
            let rd = g.sub(recon, target);
            let rd2 = g.square(rd);
            recon_terms.push(g.mean_all(rd2));

            let rpred = self.reward_pred(&mut g, store, h, z);
            let rtgt = g.slice_cols(obs, self.obs_dim - 1, 1);
            let ed = g.sub(rpred, rtgt);
            let ed2 = g.square(ed);
            reward_terms.push(g.mean_all(ed2));

            let kl = Self::kl_diag(&mut g, pm, pl, qm, ql);
            kl_terms.push(g.mean_all(kl));
        }
        let recon = mean_of(&mut g, &recon_terms);
        let reward = mean_of(&mut g, &reward_terms);
        let kl_raw = mean_of(&mut g, &kl_terms);
        let reward_w = g.scale(reward, BETA_R);
        let kl_w = g.scale(kl_raw, BETA_KL);
        let s = g.add(recon, reward_w);
        let loss = g.add(s, kl_w);

        let recon_v = g.scalar(recon)?;
        let reward_v = g.scalar(reward)?;
        let kl_raw_v = g.scalar(kl_raw)?;
        g.scalar(loss)?; // divergence check before backward
        let grads = g.backward(loss)?;
        store.apply_update(&grads, AdamConfig::with_lr(lr))?;

        let kl_v = kl_raw_v.max(FREE_BITS);
        Ok(WMLosses {
            recon: recon_v,
            reward: reward_v,
            kl: kl_v,
            kl_raw: kl_raw_v,
            total: recon_v + BETA_R * reward_v + BETA_KL * kl_v,
        })
    }

    /// Roll the prior forward under an in-graph policy. `h0`/`z0` are
    /// (b x dim) nodes; the policy maps (graph, h, z, t) to a (b x
    /// action_dim) node. No observation or environment access occurs.
    pub fn imagine_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h0: NodeId,
        z0: NodeId,
        horizon: usize,
        mut policy: impl FnMut(&mut Graph, &ParamStore, NodeId, NodeId, usize) -> NodeId,
        rng: &mut ChaCha8Rng,
    ) -> ImaginedRollout {
        assert!(horizon >= 1, "imagination horizon must be at least 1");
        let mut roll = ImaginedRollout {
            h: vec![h0],
            z: vec![z0],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
        };
        for t in 0..horizon {
            let (h, z) = (roll.h[t], roll.z[t]);
            let a = policy(g, store, h, z, t);
            let h1 = self.h_step(g, store, h, z, a);
            let (qm, ql) = self.prior_params(g, store, h1, a);
            let z1 = Self::gauss_sample(g, qm, ql, true, rng);
            let r = self.reward_pred(g, store, h1, z1);
            roll.actions.push(a);
            roll.h.push(h1);
            roll.z.push(z1);
            roll.rewards.push(r);
        }
        roll
    }

    /// Value-level imagination: rolls `starts.len()` trajectories for
    /// `horizon` steps under a value-level policy. Pure with respect to
    /// the environment and the posterior encoder.
    pub fn imagine(
        &self,
        store: &ParamStore,
        starts: &[ModelState],
        horizon: usize,
        mut policy: impl FnMut(&ModelState, usize) -> [f64; 2],
        rng: &mut ChaCha8Rng,
    ) -> ImaginedTraj {
        assert!(!starts.is_empty(), "imagine needs at least one start state");
        let n = starts.len();
        let mut g = Graph::new();
        let mut hvals: Vec<f64> = starts.iter().flat_map(|s| s.h.iter().copied()).collect();
        let mut zvals: Vec<f64> = starts.iter().flat_map(|s| s.z.iter().copied()).collect();
        let mut traj = ImaginedTraj {
            states: vec![starts.to_vec()],
            actions: Vec::new(),
            rewards: Vec::new(),
        };
        for t in 0..horizon {
            let actions: Vec<[f64; 2]> = traj.states[t].iter().map(|s| policy(s, t)).collect();
            let h = g.constant(n, self.h_dim, hvals.clone());
            let z = g.constant(n, self.z_dim, zvals.clone());
            let a_flat: Vec<f64> = actions.iter().flat_map(|a| a.iter().copied()).collect();
            let a = g.constant(n, self.action_dim, a_flat);
            let h1 = self.h_step(&mut g, store, h, z, a);
            let (qm, ql) = self.prior_params(&mut g, store, h1, a);
            let z1 = Self::gauss_sample(&mut g, qm, ql, true, rng);
            let r = self.reward_pred(&mut g, store, h1, z1);

            let hv = g.value(h1).to_vec();
            let zv = g.value(z1).to_vec();
            let mv = g.value(qm).to_vec();
            let lv = g.value(ql).to_vec();
            let states: Vec<ModelState> = (0..n)
                .map(|i| ModelState {
                    h: hv[i * self.h_dim..(i + 1) * self.h_dim].to_vec(),
                    z: zv[i * self.z_dim..(i + 1) * self.z_dim].to_vec(),
                    mean: mv[i * self.z_dim..(i + 1) * self.z_dim].to_vec(),
                    logstd: lv[i * self.z_dim..(i + 1) * self.z_dim].to_vec(),
                })
                .collect();
            traj.states.push(states);
            traj.actions.push(actions);
            traj.rewards.push(g.value(r).to_vec());
            hvals = hv;
            zvals = zv;
        }
        traj
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}
