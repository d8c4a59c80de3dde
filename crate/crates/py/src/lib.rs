//! Python bindings for the `hgcp` crate, built as the `hgcp_py` extension
//! module. Exposes the environments, reward primitives, the agent bundle
//! (init/load/save/rollout/eval), and the training and fine-tune entry
//! points. `python/smoke_test.py` at the repository root is a usage tour.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hgcp::agents::{self, AgentConfig, AgentKind};
use hgcp::config::Config;
use hgcp::envs::{
    self, env_reset, ArenaKind, Body, Env as CoreEnv, RewardVariant, TaskSpec, ACTION_DIM,
    MAZE_EVAL_EPISODE_LEN, OBS_DIM, TOUCH_RADIUS, TRAIN_EPISODE_LEN,
};
use hgcp::harness::eval::{run_zero_shot_eval, EvalProtocol, EvalReport};
use hgcp::harness::train::{run_finetune, run_training, FinetuneConfig};
use hgcp::harness::{
    collect_episode, count_targets_reached, Agent as CoreAgent, Episode, FreezeMask, ModelDims,
    RunConfig, TaskFamily,
};
use hgcp::numerics::checkpoint;
use hgcp::HgcpError;

/// Map library errors onto Python exception types: divergence becomes a
/// RuntimeError, I/O failures an IOError, everything else a ValueError.
fn py_err(e: HgcpError) -> PyErr {
    match &e {
        HgcpError::NumericalDivergence { .. } => PyRuntimeError::new_err(e.to_string()),
        HgcpError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<AgentKind> {
    match name {
        "hierarchical" => Ok(AgentKind::Hierarchical),
        "flat" => Ok(AgentKind::Flat),
        other => Err(PyValueError::new_err(format!(
            "unknown agent kind `{other}` (expected `hierarchical` or `flat`)"
        ))),
    }
}

fn kind_name(kind: AgentKind) -> &'static str {
    match kind {
        AgentKind::Hierarchical => "hierarchical",
        AgentKind::Flat => "flat",
    }
}

fn parse_variant(name: &str) -> PyResult<RewardVariant> {
    match name {
        "train" => Ok(RewardVariant::TrainShaped),
        "eval" => Ok(RewardVariant::EvalConstant),
        other => Err(PyValueError::new_err(format!(
            "unknown reward variant `{other}` (expected `train` or `eval`)"
        ))),
    }
}

fn parse_family(family: &str, body: Option<&str>) -> PyResult<TaskFamily> {
    match family {
        "locomotion" => {
            let body = Body::parse(body.unwrap_or("biped")).map_err(py_err)?;
            Ok(TaskFamily::Locomotion(body))
        }
        "navigation" => Ok(TaskFamily::Navigation),
        other => Err(PyValueError::new_err(format!(
            "unknown task family `{other}` (expected `locomotion` or `navigation`)"
        ))),
    }
}

/// Per-step reward for locomotion: 1 - |v - v_target|, clipped to [-1, 1].
#[pyfunction]
fn speed_reward(v: f64, v_target: f64) -> f64 {
    envs::speed_reward(v, v_target)
}

/// Dense navigation shaping: negative Euclidean distance to the target.
#[pyfunction]
fn nav_train_reward(pos: [f64; 2], target: [f64; 2]) -> f64 {
    envs::nav_train_reward(pos, target)
}

/// Sparse navigation reward: -0.5 within `eps` of the target, else -8.0.
#[pyfunction]
#[pyo3(signature = (pos, target, eps = TOUCH_RADIUS))]
fn nav_eval_reward(pos: [f64; 2], target: [f64; 2], eps: f64) -> f64 {
    envs::nav_eval_reward(pos, target, eps)
}

/// Number of manager decisions in an episode of `episode_len` steps with
/// a goal refreshed every `k` steps: ceil(episode_len / k).
#[pyfunction]
fn effective_horizon(episode_len: usize, k: usize) -> PyResult<usize> {
    if k == 0 {
        return Err(PyValueError::new_err("goal horizon must be positive"));
    }
    Ok(agents::effective_horizon(episode_len, k))
}

/// List the parameter groups in a checkpoint file as
/// (name, length, trainable) tuples, sorted by name.
#[pyfunction]
fn checkpoint_groups(path: PathBuf) -> PyResult<Vec<(String, usize, bool)>> {
    let store = checkpoint::load(&path).map_err(py_err)?;
    Ok(store
        .iter()
        .map(|(name, g)| (name.to_string(), g.values.len(), g.trainable))
        .collect())
}

fn spec_locomotion(v_target: f64, body: &str, episode_len: usize) -> PyResult<TaskSpec> {
    let body = Body::parse(body).map_err(py_err)?;
    TaskSpec::locomotion(v_target, body, episode_len).map_err(py_err)
}

fn spec_navigation(arena: &str, variant: &str, episode_len: usize) -> PyResult<TaskSpec> {
    let arena = ArenaKind::parse(arena).map_err(py_err)?;
    let variant = parse_variant(variant)?;
    TaskSpec::navigation(arena, variant, episode_len).map_err(py_err)
}

/// A live environment plus its latest observation.
#[pyclass(name = "Env")]
struct PyEnv {
    spec: TaskSpec,
    env: CoreEnv,
    obs: Vec<f64>,
    done: bool,
}

impl PyEnv {
    fn from_spec(spec: TaskSpec, seed: u64) -> PyResult<PyEnv> {
        let (env, obs) = env_reset(&spec, seed).map_err(py_err)?;
        Ok(PyEnv {
            spec,
            env,
            obs: obs.flat(),
            done: false,
        })
    }
}

#[pymethods]
impl PyEnv {
    /// Locomotion task: track `v_target` with the given body
    /// ("biped" or "quad").
    #[staticmethod]
    #[pyo3(signature = (v_target, body = "biped", episode_len = TRAIN_EPISODE_LEN, seed = 0))]
    fn locomotion(v_target: f64, body: &str, episode_len: usize, seed: u64) -> PyResult<PyEnv> {
        PyEnv::from_spec(spec_locomotion(v_target, body, episode_len)?, seed)
    }

    /// Navigation task on an arena ("box5", "box9", "lmaze", "smaze")
    /// with reward variant "train" (dense) or "eval" (sparse).
    #[staticmethod]
    #[pyo3(signature = (arena, variant = "train", episode_len = TRAIN_EPISODE_LEN, seed = 0))]
    fn navigation(arena: &str, variant: &str, episode_len: usize, seed: u64) -> PyResult<PyEnv> {
        PyEnv::from_spec(spec_navigation(arena, variant, episode_len)?, seed)
    }

    /// Re-initialize from the same task with a new seed; returns the
    /// first observation.
    fn reset(&mut self, seed: u64) -> PyResult<Vec<f64>> {
        let (env, obs) = env_reset(&self.spec, seed).map_err(py_err)?;
        self.env = env;
        self.obs = obs.flat();
        self.done = false;
        Ok(self.obs.clone())
    }

    /// Advance one step with a 2-d action in [-1, 1]^2 (clipped, never
    /// rejected). Returns (observation, reward, done).
    fn step(&mut self, action: [f64; 2]) -> PyResult<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(PyValueError::new_err(
                "episode finished; call reset(seed) first",
            ));
        }
        let (obs, reward, done) = self.env.step(action);
        self.obs = obs.flat();
        self.done = done;
        Ok((self.obs.clone(), reward, done))
    }

    /// The latest observation as a flat list of floats.
    fn observation(&self) -> Vec<f64> {
        self.obs.clone()
    }

    #[getter]
    fn pos(&self) -> (f64, f64) {
        let p = self.env.state().pos;
        (p[0], p[1])
    }

    #[getter]
    fn vel(&self) -> (f64, f64) {
        let v = self.env.state().vel;
        (v[0], v[1])
    }

    #[getter]
    fn target(&self) -> (f64, f64) {
        let t = self.env.state().target;
        (t[0], t[1])
    }

    /// Signed forward speed (locomotion) or speed magnitude (navigation).
    #[getter]
    fn speed(&self) -> f64 {
        self.env.speed()
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.env.state().step
    }

    #[getter]
    fn touches(&self) -> usize {
        self.env.state().touches
    }

    #[getter]
    fn done(&self) -> bool {
        self.done
    }

    #[getter]
    fn episode_len(&self) -> usize {
        self.spec.episode_length()
    }

    fn __repr__(&self) -> String {
        format!("Env({:?})", self.spec)
    }
}

fn rollout_dict(py: Python<'_>, ep: &Episode) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("return", ep.ret())?;
    d.set_item("length", ep.len())?;
    d.set_item("rewards", ep.rewards.clone())?;
    d.set_item("speeds", ep.speeds.clone())?;
    d.set_item(
        "actions",
        ep.actions.iter().map(|a| (a[0], a[1])).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "positions",
        ep.positions
            .iter()
            .map(|p| (p[0], p[1]))
            .collect::<Vec<_>>(),
    )?;
    if let Ok(n) = count_targets_reached(ep, TOUCH_RADIUS) {
        d.set_item("targets_reached", n)?;
    }
    Ok(d.unbind())
}

/// A world model, goal codebook, and policy heads bundled with their
/// parameter store.
#[pyclass(name = "Agent", unsendable)]
struct PyAgent {
    inner: CoreAgent,
}

#[pymethods]
impl PyAgent {
    /// Fresh agent. `kind` is "hierarchical" or "flat"; `family` is
    /// "locomotion" (with a `body`) or "navigation". `small=True` picks
    /// reduced network sizes suitable for tests.
    #[staticmethod]
    #[pyo3(signature = (kind, family, body = None, seed = 0, small = false))]
    fn init(
        kind: &str,
        family: &str,
        body: Option<&str>,
        seed: u64,
        small: bool,
    ) -> PyResult<PyAgent> {
        let kind = parse_kind(kind)?;
        let cfg = match kind {
            AgentKind::Hierarchical => AgentConfig::hierarchical(),
            AgentKind::Flat => AgentConfig::flat(),
        };
        let dims = if small {
            ModelDims::small()
        } else {
            ModelDims::default()
        };
        let family = parse_family(family, body)?;
        let inner = CoreAgent::new(cfg, dims, family, seed).map_err(py_err)?;
        Ok(PyAgent { inner })
    }

    /// Load from a checkpoint prefix written by `save` (or by the CLI).
    #[staticmethod]
    fn load(prefix: PathBuf) -> PyResult<PyAgent> {
        let inner = CoreAgent::load(&prefix).map_err(py_err)?;
        Ok(PyAgent { inner })
    }

    /// Write `<prefix>.ckpt` (parameters) and `<prefix>.meta` (config).
    fn save(&self, prefix: PathBuf) -> PyResult<()> {
        self.inner.save(&prefix).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        kind_name(self.inner.cfg.kind)
    }

    #[getter]
    fn family(&self) -> String {
        match self.inner.family {
            TaskFamily::Locomotion(body) => format!("locomotion/{}", body.name()),
            TaskFamily::Navigation => "navigation".to_string(),
        }
    }

    /// Network sizes as a dict.
    fn dims<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let m = &self.inner.dims;
        d.set_item("h_dim", m.h_dim)?;
        d.set_item("z_dim", m.z_dim)?;
        d.set_item("enc_hidden", m.enc_hidden)?;
        d.set_item("dec_hidden", m.dec_hidden)?;
        d.set_item("pol_hidden", m.pol_hidden)?;
        d.set_item("vae_hidden", m.vae_hidden)?;
        d.set_item("goal_k", m.goal_k)?;
        d.set_item("goal_c", m.goal_c)?;
        Ok(d)
    }

    /// Parameter groups as (name, length, trainable) tuples.
    fn groups(&self) -> Vec<(String, usize, bool)> {
        self.inner
            .store
            .iter()
            .map(|(name, g)| (name.to_string(), g.values.len(), g.trainable))
            .collect()
    }

    /// Run one locomotion episode under this agent's policy and return
    /// a dict of per-step records plus the episode return.
    #[pyo3(signature = (v_target, episode_len = TRAIN_EPISODE_LEN, seed = 0, eval_mode = true))]
    fn rollout_locomotion(
        &self,
        py: Python<'_>,
        v_target: f64,
        episode_len: usize,
        seed: u64,
        eval_mode: bool,
    ) -> PyResult<Py<PyDict>> {
        let TaskFamily::Locomotion(body) = self.inner.family else {
            return Err(PyValueError::new_err(
                "locomotion rollout requires a locomotion agent",
            ));
        };
        let spec = TaskSpec::locomotion(v_target, body, episode_len).map_err(py_err)?;
        let ep = collect_episode(&self.inner, &spec, seed, eval_mode, None).map_err(py_err)?;
        rollout_dict(py, &ep)
    }

    /// Run one navigation episode under this agent's policy and return
    /// a dict of per-step records plus the episode return.
    #[pyo3(signature = (arena, variant = "eval", episode_len = MAZE_EVAL_EPISODE_LEN, seed = 0, eval_mode = true))]
    fn rollout_navigation(
        &self,
        py: Python<'_>,
        arena: &str,
        variant: &str,
        episode_len: usize,
        seed: u64,
        eval_mode: bool,
    ) -> PyResult<Py<PyDict>> {
        if self.inner.family != TaskFamily::Navigation {
            return Err(PyValueError::new_err(
                "navigation rollout requires a navigation agent",
            ));
        }
        let spec = spec_navigation(arena, variant, episode_len)?;
        let ep = collect_episode(&self.inner, &spec, seed, eval_mode, None).map_err(py_err)?;
        rollout_dict(py, &ep)
    }

    /// Speed sweep over `grid`; returns (v_target, mean_return,
    /// mean_speed_err) rows.
    #[pyo3(signature = (grid, episodes = 10, episode_len = TRAIN_EPISODE_LEN, seed = 0))]
    fn evaluate_speed(
        &self,
        grid: Vec<f64>,
        episodes: usize,
        episode_len: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let protocol = EvalProtocol::SpeedSweep {
            grid,
            episodes_per_point: episodes,
            episode_len,
        };
        let report = run_zero_shot_eval(&self.inner, &protocol, seed, None).map_err(py_err)?;
        match report {
            EvalReport::Sweep(rows) => Ok(rows
                .into_iter()
                .map(|r| (r.v_target, r.mean_return, r.mean_speed_err))
                .collect()),
            EvalReport::Maze(_) => unreachable!("sweep protocol yields a sweep report"),
        }
    }

    /// Maze suite over the named arenas; returns (arena, respawning,
    /// targets_or_success, steps) rows.
    #[pyo3(signature = (arenas, episodes = 10, episode_len = MAZE_EVAL_EPISODE_LEN, seed = 0))]
    fn evaluate_mazes(
        &self,
        arenas: Vec<String>,
        episodes: usize,
        episode_len: usize,
        seed: u64,
    ) -> PyResult<Vec<(String, bool, f64, Option<f64>)>> {
        let arenas = arenas
            .iter()
            .map(|a| ArenaKind::parse(a).map_err(py_err))
            .collect::<PyResult<Vec<_>>>()?;
        let protocol = EvalProtocol::MazeSuite {
            arenas,
            episodes_per_arena: episodes,
            episode_len,
        };
        let report = run_zero_shot_eval(&self.inner, &protocol, seed, None).map_err(py_err)?;
        match report {
            EvalReport::Maze(rows) => Ok(rows
                .into_iter()
                .map(|r| {
                    (
                        r.arena.name().to_string(),
                        r.respawning,
                        r.targets_or_success,
                        r.steps,
                    )
                })
                .collect()),
            EvalReport::Sweep(_) => unreachable!("maze protocol yields a maze report"),
        }
    }

    fn __repr__(&self) -> String {
        format!("Agent(kind={}, family={})", self.kind(), self.family())
    }
}

/// Train an agent per a key=value config file (same format the CLI
/// accepts). Returns (agent, report_dict).
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed = 0))]
fn train(
    py: Python<'_>,
    config_path: PathBuf,
    out_dir: PathBuf,
    seed: u64,
) -> PyResult<(PyAgent, Py<PyDict>)> {
    let cfg = Config::from_file(&config_path).map_err(py_err)?;
    let rc = RunConfig::from_config(&cfg, seed, out_dir).map_err(py_err)?;
    let (agent, report) = run_training(&rc).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("final_eval", report.final_eval)?;
    d.set_item("episodes", report.episodes)?;
    d.set_item("updates", report.updates)?;
    d.set_item("metrics_path", report.metrics_path)?;
    d.set_item("ckpt_prefix", report.ckpt_prefix)?;
    Ok((PyAgent { inner: agent }, d.unbind()))
}

/// Fine-tune a checkpointed agent on a maze. `freeze` is a comma list of
/// module tags ("wm", "mgr", "vae", "wrk") to hold fixed; `threshold`
/// None means the scripted-walker threshold. Returns (agent, report_dict).
#[pyfunction]
#[pyo3(signature = (ckpt, arena, out_dir, freeze = "", threshold = None,
                    max_steps = 20_000, eval_every = 1_000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    ckpt: PathBuf,
    arena: &str,
    out_dir: PathBuf,
    freeze: &str,
    threshold: Option<f64>,
    max_steps: usize,
    eval_every: usize,
    seed: u64,
) -> PyResult<(PyAgent, Py<PyDict>)> {
    let agent = CoreAgent::load(&ckpt).map_err(py_err)?;
    let mut fc = FinetuneConfig::new(ArenaKind::parse(arena).map_err(py_err)?, out_dir);
    fc.mask = FreezeMask::parse(freeze).map_err(py_err)?;
    fc.threshold = threshold;
    fc.max_steps = max_steps;
    fc.eval_every = eval_every;
    fc.seed = seed;
    let (agent, report) = run_finetune(agent, &fc).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("steps_to_threshold", report.steps_to_threshold)?;
    d.set_item("threshold", report.threshold)?;
    d.set_item("final_eval", report.final_eval)?;
    d.set_item("csv_path", report.csv_path)?;
    Ok((PyAgent { inner: agent }, d.unbind()))
}

/// Latent-space agents on a learned world model: environments, rewards,
/// agent training, and the zero-shot/fine-tune evaluation protocols.
#[pymodule]
fn hgcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OBS_DIM", OBS_DIM)?;
    m.add("ACTION_DIM", ACTION_DIM)?;
    m.add("TOUCH_RADIUS", TOUCH_RADIUS)?;
    m.add("TRAIN_EPISODE_LEN", TRAIN_EPISODE_LEN)?;
    m.add("MAZE_EVAL_EPISODE_LEN", MAZE_EVAL_EPISODE_LEN)?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(speed_reward, m)?)?;
    m.add_function(wrap_pyfunction!(nav_train_reward, m)?)?;
    m.add_function(wrap_pyfunction!(nav_eval_reward, m)?)?;
    m.add_function(wrap_pyfunction!(effective_horizon, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_groups, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    Ok(())
}
