//! Training and fine-tuning loops: episode collection interleaved with
//! replayed world-model updates and imagination-based policy updates,
//! metrics CSV emission, checkpointing, freeze-masked adaptation, and
//! the goal-horizon ablation.

use std::fs::File;
use std::io::Write as IoWrite;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;

use crate::agents::AgentKind;
use crate::envs::{ArenaKind, RewardVariant, TaskSpec, MAZE_EVAL_EPISODE_LEN, TRAIN_EPISODE_LEN};
use crate::error::HgcpError;
use crate::goalvae::VAE_LR;
use crate::numerics::{derive_seed, rng_for, ParamStore};
use crate::worldmodel::{WMLosses, WM_LR};
use crate::Result;

use super::{
    collect_episode, collect_scripted, random_pilot, shortest_path_pilot, speed_pilot, Agent,
    AgentConfig, FreezeMask, RunConfig, StatePool, BATCH_B, BATCH_L, REPLAY_CAPACITY,
    STATE_POOL_CAPACITY,
};
use super::{ReplayBuffer, TaskFamily};

/// Imagination start states per policy update.
pub const IMAG_STARTS: usize = 16;
/// Goal-VAE batch size per update.
pub const VAE_BATCH: usize = 32;
/// Exploration-ensemble batch size per update.
pub const ENS_BATCH: usize = 32;
/// Moving-average window (in eval points) for threshold crossing.
pub const SMOOTH_WINDOW: usize = 5;

/// The metrics CSV header. One row per `eval_every` environment steps.
pub const METRICS_HEADER: &str = "env_step,episode_return,eval_return,wm_total,wm_recon,\
wm_reward,wm_kl,vae_recon,vae_kl,actor_loss,critic_loss,mgr_actor_loss,mgr_critic_loss,\
ens_loss,status";

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_eval: f64,
    pub rows: usize,
    pub episodes: usize,
    pub updates: usize,
    pub metrics_path: PathBuf,
    pub ckpt_prefix: PathBuf,
}

/// Running sums of per-update losses between metric rows.
#[derive(Default)]
struct LossAccum {
    wm: Vec<WMLosses>,
    vae_recon: Vec<f64>,
    vae_kl: Vec<f64>,
    actor: Vec<f64>,
    critic: Vec<f64>,
    mgr_actor: Vec<f64>,
    mgr_critic: Vec<f64>,
    ens: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl LossAccum {
    fn row(
        &mut self,
        env_step: usize,
        episode_return: f64,
        eval_return: f64,
        status: &str,
    ) -> String {
        let wm_total = mean(&self.wm.iter().map(|w| w.total).collect::<Vec<_>>());
        let wm_recon = mean(&self.wm.iter().map(|w| w.recon).collect::<Vec<_>>());
        let wm_reward = mean(&self.wm.iter().map(|w| w.reward).collect::<Vec<_>>());
        let wm_kl = mean(&self.wm.iter().map(|w| w.kl).collect::<Vec<_>>());
        let line = format!(
            "{env_step},{episode_return},{eval_return},{},{},{},{},{},{},{},{},{},{},{},{status}",
            cell(wm_total),
            cell(wm_recon),
            cell(wm_reward),
            cell(wm_kl),
            cell(mean(&self.vae_recon)),
            cell(mean(&self.vae_kl)),
            cell(mean(&self.actor)),
            cell(mean(&self.critic)),
            cell(mean(&self.mgr_actor)),
            cell(mean(&self.mgr_critic)),
            cell(mean(&self.ens)),
        );
        *self = LossAccum::default();
        line
    }
}

fn any_trainable(store: &ParamStore, prefix: &str) -> bool {
    store
        .iter()
        .any(|(name, group)| name.starts_with(prefix) && group.trainable)
}

/// One gradient-update round: a world-model step on a replayed batch,
/// then the policy-side updates for the agent kind. Families whose
/// parameters are all frozen are skipped.
fn do_update(
    agent: &mut Agent,
    replay: &ReplayBuffer,
    pool: &StatePool,
    rng: &mut ChaCha8Rng,
    acc: &mut LossAccum,
) -> Result<()> {
    if any_trainable(&agent.store, "wm.") {
        let batch = replay.sample(BATCH_B, BATCH_L, rng)?;
        let losses = agent.wm.train_worldmodel(&mut agent.store, &batch, WM_LR, rng)?;
        acc.wm.push(losses);
    }
    let starts = pool.sample_states(IMAG_STARTS, rng);
    match agent.cfg.kind {
        AgentKind::Hierarchical => {
            if any_trainable(&agent.store, "vae.") {
                let states = pool.sample_states(VAE_BATCH, rng);
                let v = agent.vae.train_goalvae(&mut agent.store, &states, VAE_LR, rng)?;
                acc.vae_recon.push(v.recon);
                acc.vae_kl.push(v.kl);
            }
            if any_trainable(&agent.store, "wrk.") {
                let goal_states = pool.sample_states(IMAG_STARTS, rng);
                let goals = goal_states
                    .iter()
                    .map(|s| {
                        let (code, _) = agent.vae.encode(&agent.store, s, false, rng)?;
                        agent.vae.decode(&agent.store, &code)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let w = agent.pol.train_worker(
                    &mut agent.store,
                    &agent.wm,
                    &agent.cfg,
                    &starts,
                    &goals,
                    rng,
                )?;
                acc.actor.push(w.actor);
                acc.critic.push(w.critic);
            }
            if any_trainable(&agent.store, "mgr.") {
                let m = agent.pol.train_manager(
                    &mut agent.store,
                    &agent.wm,
                    &agent.vae,
                    &agent.cfg,
                    &starts,
                    rng,
                )?;
                acc.mgr_actor.push(m.actor);
                acc.mgr_critic.push(m.critic);
                let (states, next_h) = pool.sample_transitions(ENS_BATCH, rng);
                let e = agent
                    .pol
                    .train_ensemble(&mut agent.store, &states, &next_h, agent.cfg.lr)?;
                acc.ens.push(e);
            }
        }
        AgentKind::Flat => {
            let f = agent
                .pol
                .train_flat(&mut agent.store, &agent.wm, &agent.cfg, &starts, rng)?;
            acc.actor.push(f.actor);
            acc.critic.push(f.critic);
        }
    }
    Ok(())
}

/// Mean deterministic-eval return over `episodes` fresh episodes.
fn eval_mean(agent: &Agent, spec: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let ep = collect_episode(agent, spec, derive_seed(seed, "eval-ep", e as u64), true, None)?;
        total += ep.ret();
    }
    Ok(total / episodes as f64)
}

/// Train a fresh agent under the run config.
pub fn run_training(rc: &RunConfig) -> Result<(Agent, TrainReport)> {
    rc.validate()?;
    let agent = Agent::new(
        rc.agent,
        rc.dims,
        rc.task.family(),
        derive_seed(rc.seed, "agent-init", 0),
    )?;
    run_training_with(agent, rc)
}

/// Train an existing agent (used by fine-tuning and tests). Interleaves
/// collection and updates: one update per `train_every` env steps, one
/// metrics row + checkpoint per `eval_every` env steps. A numerical
/// divergence writes a final `diverged` row and aborts with the error.
pub fn run_training_with(mut agent: Agent, rc: &RunConfig) -> Result<(Agent, TrainReport)> {
    rc.validate()?;
    if agent.family != rc.task.family() {
        return Err(HgcpError::Config(format!(
            "agent was built for {} tasks but the run trains on {}",
            agent.family.name(),
            rc.task.family().name()
        )));
    }
    std::fs::create_dir_all(&rc.out_dir)?;
    std::fs::write(rc.out_dir.join("manifest.cfg"), rc.manifest())?;
    let metrics_path = rc.out_dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;

    let mut replay = ReplayBuffer::new(REPLAY_CAPACITY);
    let mut pool = StatePool::new(STATE_POOL_CAPACITY);
    let mut task_rng = rng_for(rc.seed, "task", 0);
    let mut train_rng = rng_for(rc.seed, "train", 0);

    let mut env_steps = 0usize;
    let mut episodes = 0usize;
    let mut updates = 0usize;
    let mut rows = 0usize;
    let mut final_eval = f64::NAN;
    let mut acc = LossAccum::default();
    let ckpt_prefix = rc.out_dir.join("latest");

    while env_steps < rc.total_steps {
        let spec = rc.task.sample(&mut task_rng)?;
        let ep = collect_episode(
            &agent,
            &spec,
            derive_seed(rc.seed, "collect", episodes as u64),
            false,
            Some(&mut pool),
        )?;
        episodes += 1;
        env_steps += ep.len();
        let last_return = ep.ret();
        replay.push(ep);

        while updates < env_steps / rc.train_every {
            if let Err(e) = do_update(&mut agent, &replay, &pool, &mut train_rng, &mut acc) {
                if matches!(e, HgcpError::NumericalDivergence { .. }) {
                    let line = acc.row(env_steps, last_return, f64::NAN, "diverged");
                    writeln!(metrics, "{line}")?;
                    metrics.flush()?;
                }
                return Err(e);
            }
            updates += 1;
        }

        while (rows + 1) * rc.eval_every <= env_steps && (rows + 1) * rc.eval_every <= rc.total_steps
        {
            let eval_spec = rc.task.eval_spec()?;
            let eval_ret = eval_mean(
                &agent,
                &eval_spec,
                rc.eval_episodes,
                derive_seed(rc.seed, "eval", rows as u64),
            )?;
            final_eval = eval_ret;
            let line = acc.row((rows + 1) * rc.eval_every, last_return, eval_ret, "ok");
            writeln!(metrics, "{line}")?;
            metrics.flush()?;
            rows += 1;
            agent.save(&ckpt_prefix)?;
        }
    }
    agent.save(&rc.out_dir.join("final"))?;
    Ok((
        agent,
        TrainReport {
            final_eval,
            rows,
            episodes,
            updates,
            metrics_path,
            ckpt_prefix: rc.out_dir.join("final"),
        },
    ))
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Fine-tune protocol parameters for one regime on one target maze.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub mask: FreezeMask,
    pub arena: ArenaKind,
    pub train_episode_len: usize,
    pub eval_episode_len: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Eval-return threshold; `None` computes the scripted-walker
    /// threshold automatically.
    pub threshold: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl FinetuneConfig {
    pub fn new(arena: ArenaKind, out_dir: PathBuf) -> FinetuneConfig {
        FinetuneConfig {
            mask: FreezeMask::none(),
            arena,
            train_episode_len: TRAIN_EPISODE_LEN,
            eval_episode_len: MAZE_EVAL_EPISODE_LEN,
            max_steps: 20_000,
            eval_every: 1_000,
            threshold: None,
            seed: 0,
            out_dir,
        }
    }
}

/// Outcome of a fine-tune run.
#[derive(Debug, Clone)]
pub struct FinetuneReport {
    /// First env step whose smoothed eval return met the threshold.
    pub steps_to_threshold: Option<usize>,
    pub threshold: f64,
    pub final_eval: f64,
    pub csv_path: PathBuf,
}

/// Mean return of the shortest-path walker on the arena's eval task,
/// minus 20% slack: the adaptation bar a fine-tuned agent must clear.
pub fn scripted_threshold(arena: ArenaKind, episode_len: usize, seed: u64) -> Result<f64> {
    let spec = TaskSpec::navigation(arena, RewardVariant::EvalConstant, episode_len)?;
    let mut total = 0.0;
    let n = 3;
    for i in 0..n {
        let mut pilot = shortest_path_pilot();
        let ep = collect_scripted(&spec, derive_seed(seed, "walker", i), &mut pilot)?;
        total += ep.ret();
    }
    let oracle = total / n as f64;
    Ok(oracle - 0.2 * oracle.abs())
}

/// Adapt an agent to a held-out maze under a freeze mask, tracking the
/// number of env steps until the smoothed eval return crosses the
/// threshold. Training uses the dense shaped reward; evaluation uses the
/// sparse eval reward on the same arena.
pub fn run_finetune(mut agent: Agent, fc: &FinetuneConfig) -> Result<(Agent, FinetuneReport)> {
    if fc.max_steps == 0 || fc.eval_every == 0 || fc.max_steps % fc.eval_every != 0 {
        return Err(HgcpError::Config(
            "max_steps must be a positive multiple of eval_every".into(),
        ));
    }
    fc.mask.apply(&mut agent.store, agent.cfg.kind)?;
    if agent.family != TaskFamily::Navigation {
        return Err(HgcpError::Config(format!(
            "fine-tuning targets navigation tasks; agent was built for {}",
            agent.family.name()
        )));
    }
    let threshold = match fc.threshold {
        Some(t) => t,
        None => scripted_threshold(fc.arena, fc.eval_episode_len, fc.seed)?,
    };
    std::fs::create_dir_all(&fc.out_dir)?;
    let mut manifest = String::new();
    manifest.push_str("protocol = finetune\n");
    manifest.push_str(&format!("arena = {}\n", fc.arena.name()));
    manifest.push_str(&format!(
        "frozen = {}\n",
        [
            (fc.mask.wm, "wm"),
            (fc.mask.manager, "mgr"),
            (fc.mask.vae, "vae"),
            (fc.mask.worker, "wrk"),
        ]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect::<Vec<_>>()
        .join(",")
    ));
    manifest.push_str(&format!("threshold = {threshold}\n"));
    manifest.push_str(&format!("train_episode_len = {}\n", fc.train_episode_len));
    manifest.push_str(&format!("eval_episode_len = {}\n", fc.eval_episode_len));
    manifest.push_str(&format!("max_steps = {}\n", fc.max_steps));
    manifest.push_str(&format!("eval_every = {}\n", fc.eval_every));
    manifest.push_str(&format!("seed = {}\n", fc.seed));
    std::fs::write(fc.out_dir.join("manifest.cfg"), manifest)?;

    let csv_path = fc.out_dir.join("finetune.csv");
    let mut csv = File::create(&csv_path)?;
    writeln!(csv, "env_step,eval_return,smoothed,status")?;
    csv.flush()?;

    let train_spec =
        TaskSpec::navigation(fc.arena, RewardVariant::TrainShaped, fc.train_episode_len)?;
    let eval_spec =
        TaskSpec::navigation(fc.arena, RewardVariant::EvalConstant, fc.eval_episode_len)?;

    let mut replay = ReplayBuffer::new(REPLAY_CAPACITY);
    let mut pool = StatePool::new(STATE_POOL_CAPACITY);
    let mut train_rng = rng_for(fc.seed, "train", 0);
    let mut env_steps = 0usize;
    let mut episodes = 0usize;
    let mut updates = 0usize;
    let mut rows = 0usize;
    let mut recent: Vec<f64> = Vec::new();
    let mut steps_to_threshold = None;
    let mut final_eval = f64::NAN;
    let mut acc = LossAccum::default();

    while env_steps < fc.max_steps {
        let ep = collect_episode(
            &agent,
            &train_spec,
            derive_seed(fc.seed, "collect", episodes as u64),
            false,
            Some(&mut pool),
        )?;
        episodes += 1;
        env_steps += ep.len();
        replay.push(ep);
        while updates < env_steps / super::TRAIN_EVERY {
            if let Err(e) = do_update(&mut agent, &replay, &pool, &mut train_rng, &mut acc) {
                if matches!(e, HgcpError::NumericalDivergence { .. }) {
                    writeln!(csv, "{env_steps},NaN,NaN,diverged")?;
                    csv.flush()?;
                }
                return Err(e);
            }
            updates += 1;
        }
        while (rows + 1) * fc.eval_every <= env_steps
            && (rows + 1) * fc.eval_every <= fc.max_steps
        {
            let step = (rows + 1) * fc.eval_every;
            let ret = eval_mean(&agent, &eval_spec, 1, derive_seed(fc.seed, "eval", rows as u64))?;
            recent.push(ret);
            let window = &recent[recent.len().saturating_sub(SMOOTH_WINDOW)..];
            let smoothed = window.iter().sum::<f64>() / window.len() as f64;
            if steps_to_threshold.is_none() && smoothed >= threshold {
                steps_to_threshold = Some(step);
            }
            final_eval = ret;
            writeln!(csv, "{step},{ret},{smoothed},ok")?;
            csv.flush()?;
            rows += 1;
        }
    }
    agent.save(&fc.out_dir.join("final"))?;
    Ok((
        agent,
        FinetuneReport {
            steps_to_threshold,
            threshold,
            final_eval,
            csv_path,
        },
    ))
}

// ---------------------------------------------------------------------------
// Adaptation regimes

/// One fine-tuning regime: agent kind, whether it starts from a
/// pretrained checkpoint, and which families stay frozen.
#[derive(Debug, Clone)]
pub struct Regime {
    pub name: &'static str,
    pub kind: AgentKind,
    pub pretrained: bool,
    pub mask: FreezeMask,
}

/// The six adaptation regimes compared on held-out mazes: flat and
/// hierarchical agents from scratch, a fine-tuned flat agent, and
/// fine-tuned hierarchies that adapt growing subsets of components
/// (world model + manager, + goal VAE, + worker).
pub fn table2_regimes() -> Vec<Regime> {
    vec![
        Regime {
            name: "flat-scratch",
            kind: AgentKind::Flat,
            pretrained: false,
            mask: FreezeMask::none(),
        },
        Regime {
            name: "flat-finetune",
            kind: AgentKind::Flat,
            pretrained: true,
            mask: FreezeMask::none(),
        },
        Regime {
            name: "hier-scratch",
            kind: AgentKind::Hierarchical,
            pretrained: false,
            mask: FreezeMask::none(),
        },
        Regime {
            name: "adapt-wm-mgr",
            kind: AgentKind::Hierarchical,
            pretrained: true,
            mask: FreezeMask::train_only(&["wm", "mgr"]).expect("valid groups"),
        },
        Regime {
            name: "adapt-wm-mgr-vae",
            kind: AgentKind::Hierarchical,
            pretrained: true,
            mask: FreezeMask::train_only(&["wm", "mgr", "vae"]).expect("valid groups"),
        },
        Regime {
            name: "adapt-all",
            kind: AgentKind::Hierarchical,
            pretrained: true,
            mask: FreezeMask::none(),
        },
    ]
}

// ---------------------------------------------------------------------------
// Goal-horizon ablation

/// Train one hierarchical agent per goal horizon and report the final
/// eval return of each. Writes `horizon_ablation.csv` under the base
/// out_dir; each run gets its own subdirectory.
pub fn run_horizon_ablation(base: &RunConfig, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if base.agent.kind != AgentKind::Hierarchical {
        return Err(HgcpError::Config(
            "the goal-horizon ablation requires a hierarchical agent".into(),
        ));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let rc = RunConfig {
            agent: AgentConfig {
                goal_horizon: k,
                ..base.agent
            },
            out_dir: base.out_dir.join(format!("k{k}")),
            ..base.clone()
        };
        let (_, report) = run_training(&rc)?;
        out.push((k, report.final_eval));
    }
    let mut csv = String::from("goal_horizon,final_eval_return\n");
    for (k, ret) in &out {
        csv.push_str(&format!("{k},{ret}\n"));
    }
    std::fs::write(base.out_dir.join("horizon_ablation.csv"), csv)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scripted baselines

/// Mean return of uniform random actions over `episodes` episodes.
pub fn random_baseline(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..episodes {
        let s = derive_seed(seed, "random-baseline", i as u64);
        let mut pilot = random_pilot(rng_for(s, "pilot", 0));
        total += collect_scripted(spec, s, &mut pilot)?.ret();
    }
    Ok(total / episodes as f64)
}

/// Mean return of the scripted oracle for the task family: the deadbeat
/// speed tracker for locomotion, the shortest-path walker for mazes.
pub fn oracle_baseline(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..episodes {
        let s = derive_seed(seed, "oracle-baseline", i as u64);
        match spec {
            TaskSpec::Locomotion { v_target, .. } => {
                let mut pilot = speed_pilot(*v_target);
                total += collect_scripted(spec, s, &mut pilot)?.ret();
            }
            TaskSpec::Navigation { .. } => {
                let mut pilot = shortest_path_pilot();
                total += collect_scripted(spec, s, &mut pilot)?.ret();
            }
        }
    }
    Ok(total / episodes as f64)
}
