//! Deterministic desk-scale environments: speed-matching locomotion and
//! maze navigation, with train/eval reward variants and coarse egocentric
//! pixel rendering.
//!
//! Stepping is a pure transition on [`Env`] values; any number of
//! environments may run on different threads with no coordination.

pub mod arena;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::HgcpError;
use crate::Result;

pub use arena::{Arena, ArenaKind, Cell};

/// Pixel grid width/height.
pub const PIXELS_W: usize = 16;
pub const PIXELS_H: usize = 16;
/// Flattened pixel channel count.
pub const PIXEL_DIM: usize = PIXELS_W * PIXELS_H * 3;
/// Velocity (2) + heading sin/cos (2).
pub const PROPRIO_DIM: usize = 4;
/// Pixels + proprio + previous-reward channel.
pub const OBS_DIM: usize = PIXEL_DIM + PROPRIO_DIM + 1;
/// All environments take 2-vector actions in [-1, 1]^2.
pub const ACTION_DIM: usize = 2;

/// Locomotion body archetype; selects dynamics constants and speed bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Body {
    BipedLike,
    QuadLike,
}

impl Body {
    /// Hard speed cap, also the full-throttle terminal speed.
    pub fn v_max(self) -> f64 {
        match self {
            Body::BipedLike => 8.0,
            Body::QuadLike => 5.0,
        }
    }

    /// Acceleration gain, chosen so the terminal speed alpha/(1-rho)
    /// equals v_max and the eval sweep upper end is reachable.
    pub fn accel_gain(self) -> f64 {
        self.v_max() * (1.0 - LOCO_RHO)
    }

    /// Training target-speed band [lo, hi].
    pub fn train_band(self) -> (f64, f64) {
        match self {
            Body::BipedLike => (1.0, 3.0),
            Body::QuadLike => (0.5, 1.5),
        }
    }

    /// Upper end of the zero-shot evaluation sweep (lower end is 0).
    pub fn sweep_max(self) -> f64 {
        self.v_max()
    }

    /// Draw a training target speed uniformly from the band.
    pub fn sample_v_target(self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.train_band();
        rng.gen_range(lo..hi)
    }

    pub fn name(self) -> &'static str {
        match self {
            Body::BipedLike => "biped",
            Body::QuadLike => "quad",
        }
    }

    pub fn parse(name: &str) -> Result<Body> {
        match name {
            "biped" => Ok(Body::BipedLike),
            "quad" => Ok(Body::QuadLike),
            other => Err(HgcpError::Config(format!("unknown body `{other}`"))),
        }
    }
}

/// Momentum of the locomotion point mass.
pub const LOCO_RHO: f64 = 0.9;
/// Momentum of the navigation point mass.
pub const NAV_RHO: f64 = 0.8;
/// Navigation acceleration gain.
pub const NAV_ACCEL: f64 = 0.08;
/// Navigation speed cap (= NAV_ACCEL / (1 - NAV_RHO)).
pub const NAV_V_MAX: f64 = 0.4;
/// Touch radius, equal to the target radius.
pub const TOUCH_RADIUS: f64 = 0.5;
/// Default episode lengths.
pub const TRAIN_EPISODE_LEN: usize = 500;
pub const MAZE_EVAL_EPISODE_LEN: usize = 3000;

/// Which reward the navigation environment emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardVariant {
    /// Dense shaping: negative Euclidean distance to the target.
    TrainShaped,
    /// Constant -8.0, or -0.5 within the touch radius.
    EvalConstant,
}

/// Full task description; an [`Env`] is built from one of these.
#[derive(Debug, Clone)]
pub enum TaskSpec {
    Locomotion {
        v_target: f64,
        body: Body,
        episode_length: usize,
    },
    Navigation {
        arena: ArenaKind,
        reward_variant: RewardVariant,
        target_respawn: bool,
        touch_radius: f64,
        episode_length: usize,
    },
}

impl TaskSpec {
    pub fn locomotion(v_target: f64, body: Body, episode_length: usize) -> Result<TaskSpec> {
        let spec = TaskSpec::Locomotion {
            v_target,
            body,
            episode_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Navigation task; the respawn flag is implied by the arena family.
    pub fn navigation(
        arena: ArenaKind,
        reward_variant: RewardVariant,
        episode_length: usize,
    ) -> Result<TaskSpec> {
        let spec = TaskSpec::Navigation {
            arena,
            reward_variant,
            target_respawn: arena.target_respawn(),
            touch_radius: TOUCH_RADIUS,
            episode_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Locomotion {
                v_target,
                episode_length,
                ..
            } => {
                if *v_target < 0.0 {
                    return Err(HgcpError::Config(format!("v_target {v_target} < 0")));
                }
                if *episode_length == 0 {
                    return Err(HgcpError::Config("episode_length must be positive".into()));
                }
            }
            TaskSpec::Navigation {
                arena,
                target_respawn,
                touch_radius,
                episode_length,
                ..
            } => {
                if *touch_radius <= 0.0 {
                    return Err(HgcpError::Config("touch_radius must be positive".into()));
                }
                if *episode_length == 0 {
                    return Err(HgcpError::Config("episode_length must be positive".into()));
                }
                if *target_respawn != arena.target_respawn() {
                    return Err(HgcpError::Config(format!(
                        "arena {} requires target_respawn={}",
                        arena.name(),
                        arena.target_respawn()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn episode_length(&self) -> usize {
        match self {
            TaskSpec::Locomotion { episode_length, .. } => *episode_length,
            TaskSpec::Navigation { episode_length, .. } => *episode_length,
        }
    }
}

/// Mutable environment state; a plain value.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub heading: f64,
    pub target: [f64; 2],
    pub step: usize,
    /// Touch events so far this episode (rising edges of the in-radius
    /// indicator; respawns re-arm the edge detector).
    pub touches: usize,
    in_touch: bool,
    rng: ChaCha8Rng,
}

/// One observation: flattened pixels, proprioception, and the reward
/// emitted at the previous step (the task-conditioning channel).
#[derive(Debug, Clone)]
pub struct Observation {
    pub pixels: Vec<f64>,
    pub proprio: [f64; PROPRIO_DIM],
    pub prev_reward: f64,
}

impl Observation {
    /// Flatten to the model input layout: pixels, proprio, prev_reward.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend_from_slice(&self.pixels);
        v.extend_from_slice(&self.proprio);
        v.push(self.prev_reward);
        v
    }
}

/// A live environment: spec + (for navigation) arena + state.
#[derive(Debug, Clone)]
pub struct Env {
    spec: TaskSpec,
    arena: Option<Arena>,
    state: EnvState,
}

/// Reset per spec: locomotion starts at the origin at rest; navigation
/// starts at the spawn cell with uniform random heading and a target from
/// the arena's spawn rule. `prev_reward` is 0.
pub fn env_reset(spec: &TaskSpec, seed: u64) -> Result<(Env, Observation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (arena, state) = match spec {
        TaskSpec::Locomotion { .. } => {
            let state = EnvState {
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
                heading: 0.0,
                target: [0.0, 0.0],
                step: 0,
                touches: 0,
                in_touch: false,
                rng,
            };
            (None, state)
        }
        TaskSpec::Navigation {
            arena,
            target_respawn,
            touch_radius,
            ..
        } => {
            let arena = Arena::shipped(*arena);
            let (sc, sr) = arena.spawn_cell();
            let pos = [sc as f64 + 0.5, sr as f64 + 0.5];
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let target = if *target_respawn {
                sample_target(&arena, pos, *touch_radius, &mut rng)
            } else {
                let (tc, tr) = arena
                    .fixed_target_cell()
                    .unwrap_or_else(|| arena.furthest_free_cell());
                [tc as f64 + 0.5, tr as f64 + 0.5]
            };
            let state = EnvState {
                pos,
                vel: [0.0, 0.0],
                heading,
                target,
                step: 0,
                touches: 0,
                in_touch: false,
                rng,
            };
            (Some(arena), state)
        }
    };
    let env = Env {
        spec: spec.clone(),
        arena,
        state,
    };
    let obs = env.observe(0.0);
    Ok((env, obs))
}

/// Uniform target position over free cells, rejecting spots within the
/// touch radius of `avoid` so a fresh target is never already touched.
fn sample_target(arena: &Arena, avoid: [f64; 2], radius: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let cells = arena.free_cells();
    for _ in 0..1000 {
        let (c, r) = cells[rng.gen_range(0..cells.len())];
        let x = c as f64 + rng.gen_range(0.2..0.8);
        let y = r as f64 + rng.gen_range(0.2..0.8);
        if dist2([x, y], avoid) >= radius {
            return [x, y];
        }
    }
    // Unreachable for any arena larger than the touch radius.
    [cells[0].0 as f64 + 0.5, cells[0].1 as f64 + 0.5]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Advance one step. Actions are clipped to [-1, 1]^2, never rejected.
/// Returns (observation, reward, done).
pub fn env_step(env: &mut Env, action: [f64; 2]) -> (Observation, f64, bool) {
    env.step(action)
}

impl Env {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn arena(&self) -> Option<&Arena> {
        self.arena.as_ref()
    }

    /// Signed forward speed (locomotion) or speed along velocity (nav).
    pub fn speed(&self) -> f64 {
        match self.spec {
            TaskSpec::Locomotion { .. } => self.state.vel[0],
            TaskSpec::Navigation { .. } => dist2(self.state.vel, [0.0, 0.0]),
        }
    }

    pub fn step(&mut self, action: [f64; 2]) -> (Observation, f64, bool) {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let reward = match &self.spec {
            TaskSpec::Locomotion { v_target, body, .. } => {
                let mut v = LOCO_RHO * self.state.vel[0] + body.accel_gain() * a[0];
                v = v.clamp(-body.v_max(), body.v_max());
                self.state.vel = [v, 0.0];
                self.state.pos[0] += v;
                speed_reward(v, *v_target)
            }
            TaskSpec::Navigation {
                reward_variant,
                target_respawn,
                touch_radius,
                ..
            } => {
                let (variant, respawn, radius) = (*reward_variant, *target_respawn, *touch_radius);
                let mut vx = NAV_RHO * self.state.vel[0] + NAV_ACCEL * a[0];
                let mut vy = NAV_RHO * self.state.vel[1] + NAV_ACCEL * a[1];
                let speed = (vx * vx + vy * vy).sqrt();
                if speed > NAV_V_MAX {
                    vx *= NAV_V_MAX / speed;
                    vy *= NAV_V_MAX / speed;
                }
                let arena = self.arena.as_ref().expect("navigation env has arena");
                let (pos, vel) = clamp_move(arena, self.state.pos, [vx, vy]);
                self.state.pos = pos;
                self.state.vel = vel;
                // Face the direction of travel once actually moving.
                if vel[0] * vel[0] + vel[1] * vel[1] > 1e-4 {
                    self.state.heading = libm::atan2(vel[1], vel[0]);
                }
                let d = dist2(self.state.pos, self.state.target);
                let reward = match variant {
                    RewardVariant::TrainShaped => nav_train_reward(self.state.pos, self.state.target),
                    RewardVariant::EvalConstant => {
                        nav_eval_reward(self.state.pos, self.state.target, radius)
                    }
                };
                let touching = d < radius;
                if touching && !self.state.in_touch {
                    self.state.touches += 1;
                }
                self.state.in_touch = touching;
                if touching && respawn {
                    let avoid = self.state.pos;
                    let target = sample_target(arena, avoid, radius, &mut self.state.rng);
                    self.state.target = target;
                    self.state.in_touch = false;
                }
                reward
            }
        };
        self.state.step += 1;
        let done = self.state.step >= self.spec.episode_length();
        let obs = self.observe(reward);
        (obs, reward, done)
    }

    fn observe(&self, prev_reward: f64) -> Observation {
        let pixels = match &self.spec {
            TaskSpec::Locomotion { body, .. } => {
                render::render_locomotion(self.state.pos[0], *body)
            }
            TaskSpec::Navigation { touch_radius, .. } => render::render_arena(
                self.arena.as_ref().expect("navigation env has arena"),
                self.state.pos,
                self.state.heading,
                self.state.target,
                *touch_radius,
            ),
        };
        Observation {
            pixels,
            proprio: [
                self.state.vel[0],
                self.state.vel[1],
                libm::sin(self.state.heading),
                libm::cos(self.state.heading),
            ],
            prev_reward,
        }
    }
}

/// Axis-separated wall clamping. Each axis moves independently; a blocked
/// axis is clamped to the wall face and its velocity component zeroed.
/// Speeds are below one cell per step, so per-axis checks cannot tunnel.
fn clamp_move(arena: &Arena, pos: [f64; 2], vel: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    const SKIN: f64 = 1e-9;
    let mut p = pos;
    let mut v = vel;

    let nx = p[0] + v[0];
    if arena.is_free_pos(nx, p[1]) {
        p[0] = nx;
    } else {
        p[0] = if v[0] > 0.0 {
            p[0].floor() + 1.0 - SKIN
        } else {
            p[0].floor() + SKIN
        };
        v[0] = 0.0;
    }

    let ny = p[1] + v[1];
    if arena.is_free_pos(p[0], ny) {
        p[1] = ny;
    } else {
        p[1] = if v[1] > 0.0 {
            p[1].floor() + 1.0 - SKIN
        } else {
            p[1].floor() + SKIN
        };
        v[1] = 0.0;
    }
    (p, v)
}

/// Locomotion reward: 1 - |v - v_target|. Maximum 1 at an exact match.
pub fn speed_reward(v: f64, v_target: f64) -> f64 {
    1.0 - (v - v_target).abs()
}

/// Navigation training reward: negative Euclidean distance to the target.
pub fn nav_train_reward(pos: [f64; 2], target: [f64; 2]) -> f64 {
    -dist2(pos, target)
}

/// Navigation evaluation reward: -0.5 (negative target radius) strictly
/// inside the touch radius, constant -8.0 everywhere else.
pub fn nav_eval_reward(pos: [f64; 2], target: [f64; 2], eps: f64) -> f64 {
    if dist2(pos, target) < eps {
        -0.5
    } else {
        -8.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nav_spec(kind: ArenaKind, variant: RewardVariant) -> TaskSpec {
        TaskSpec::navigation(kind, variant, 500).unwrap()
    }

    #[test]
    fn speed_reward_matches_formula() {
        assert_eq!(speed_reward(2.0, 2.0), 1.0);
        assert_eq!(speed_reward(1.0, 3.0), -1.0);
        assert_eq!(speed_reward(8.0, 0.0), -7.0);
    }

    #[test]
    fn nav_train_reward_is_negative_euclidean_distance() {
        assert_eq!(nav_train_reward([1.0, 1.0], [1.0, 1.0]), 0.0);
        assert_eq!(nav_train_reward([0.0, 0.0], [3.0, 4.0]), -5.0);
        assert!(nav_train_reward([2.0, 7.0], [-1.0, 0.3]) <= 0.0);
    }

    #[test]
    fn nav_eval_reward_is_two_valued_with_strict_boundary() {
        let eps = 0.5;
        assert_eq!(nav_eval_reward([1.0, 1.0], [1.0, 1.0], eps), -0.5);
        assert_eq!(nav_eval_reward([0.0, 0.0], [5.0, 0.0], eps), -8.0);
        // Exactly on the boundary: the indicator is strict, so -8.0.
        assert_eq!(nav_eval_reward([0.0, 0.0], [eps, 0.0], eps), -8.0);
        assert_eq!(nav_eval_reward([0.0, 0.0], [eps - 1e-12, 0.0], eps), -0.5);
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let spec = nav_spec(ArenaKind::Box5, RewardVariant::TrainShaped);
        let (a, oa) = env_reset(&spec, 7).unwrap();
        let (b, ob) = env_reset(&spec, 7).unwrap();
        assert_eq!(a.state().pos, b.state().pos);
        assert_eq!(a.state().heading, b.state().heading);
        assert_eq!(a.state().target, b.state().target);
        assert_eq!(oa.pixels, ob.pixels);
        assert_eq!(oa.prev_reward, 0.0);
    }

    #[test]
    fn smaze_target_is_fixed_regardless_of_seed() {
        let spec = nav_spec(ArenaKind::SMaze, RewardVariant::EvalConstant);
        let (a, _) = env_reset(&spec, 1).unwrap();
        let (b, _) = env_reset(&spec, 999).unwrap();
        assert_eq!(a.state().target, b.state().target);
        // Fixed target sits at the BFS-furthest free cell.
        let arena = Arena::shipped(ArenaKind::SMaze);
        let (c, r) = arena.furthest_free_cell();
        assert_eq!(a.state().target, [c as f64 + 0.5, r as f64 + 0.5]);
    }

    #[test]
    fn locomotion_reset_is_at_rest() {
        let spec = TaskSpec::locomotion(2.0, Body::BipedLike, 100).unwrap();
        let (env, obs) = env_reset(&spec, 3).unwrap();
        assert_eq!(env.state().vel, [0.0, 0.0]);
        assert_eq!(env.state().pos, [0.0, 0.0]);
        assert_eq!(obs.prev_reward, 0.0);
    }

    #[test]
    fn zero_action_from_rest_stays_put() {
        let spec = nav_spec(ArenaKind::Box5, RewardVariant::TrainShaped);
        let (mut env, _) = env_reset(&spec, 5).unwrap();
        let before = env.state().pos;
        let (_, _, _) = env.step([0.0, 0.0]);
        assert_eq!(env.state().pos, before);
        assert_eq!(env.state().vel, [0.0, 0.0]);
    }

    #[test]
    fn full_throttle_matches_geometric_series_closed_form() {
        let body = Body::BipedLike;
        let spec = TaskSpec::locomotion(0.0, body, 200).unwrap();
        let (mut env, _) = env_reset(&spec, 0).unwrap();
        let (rho, alpha) = (LOCO_RHO, body.accel_gain());
        for n in 1..=100usize {
            env.step([1.0, 0.0]);
            let closed = alpha * (1.0 - rho.powi(n as i32)) / (1.0 - rho);
            let v = env.state().vel[0];
            assert!((v - closed).abs() < 1e-9, "step {n}: {v} vs {closed}");
        }
        // Terminal speed: alpha/(1-rho), which the gain pins to v_max.
        let terminal = alpha / (1.0 - rho);
        assert!((env.state().vel[0] - terminal).abs() < 1e-3);
        assert!((terminal - body.v_max()).abs() < 1e-12);
    }

    #[test]
    fn wall_clamp_stops_at_face_without_tunneling() {
        let spec = nav_spec(ArenaKind::Box5, RewardVariant::TrainShaped);
        let (mut env, _) = env_reset(&spec, 2).unwrap();
        // Drive hard left into the x=1 wall face for many steps.
        for _ in 0..200 {
            env.step([-1.0, 0.0]);
            let arena = Arena::shipped(ArenaKind::Box5);
            assert!(arena.is_free_pos(env.state().pos[0], env.state().pos[1]));
        }
        let x = env.state().pos[0];
        assert!((x - 1.0).abs() < 1e-6, "expected clamp at face x=1, got {x}");
        assert_eq!(env.state().vel[0], 0.0);
    }

    #[test]
    fn episode_terminates_exactly_at_length() {
        let spec = TaskSpec::locomotion(1.0, Body::QuadLike, 5).unwrap();
        let (mut env, _) = env_reset(&spec, 0).unwrap();
        for i in 1..=5 {
            let (_, _, done) = env.step([0.3, 0.0]);
            assert_eq!(done, i == 5);
        }
    }

    #[test]
    fn eval_variant_emits_only_the_two_constants() {
        let spec = nav_spec(ArenaKind::Box9, RewardVariant::EvalConstant);
        let (mut env, _) = env_reset(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (_, r, _) = env.step(a);
            assert!(r == -8.0 || r == -0.5, "reward {r}");
        }
    }

    #[test]
    fn respawn_count_equals_touch_count() {
        // Drive straight at the target repeatedly; each touch must move it.
        let spec = nav_spec(ArenaKind::Box9, RewardVariant::TrainShaped);
        let (mut env, _) = env_reset(&spec, 21).unwrap();
        let mut relocations = 0;
        let mut last_target = env.state().target;
        for _ in 0..3000 {
            let to = [
                env.state().target[0] - env.state().pos[0],
                env.state().target[1] - env.state().pos[1],
            ];
            let n = (to[0] * to[0] + to[1] * to[1]).sqrt().max(1e-9);
            env.step([(to[0] / n).clamp(-1.0, 1.0), (to[1] / n).clamp(-1.0, 1.0)]);
            if env.state().target != last_target {
                relocations += 1;
                last_target = env.state().target;
            }
        }
        assert!(relocations >= 3, "homing policy should touch repeatedly");
        assert_eq!(env.state().touches, relocations);
    }

    #[test]
    fn trajectories_are_bit_deterministic() {
        let spec = nav_spec(ArenaKind::LMaze, RewardVariant::TrainShaped);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let (mut env, _) = env_reset(&spec, 42).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut trace = Vec::new();
            for _ in 0..300 {
                let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let (obs, r, _) = env.step(a);
                trace.push((env.state().pos, r, obs.pixels));
            }
            runs.push(trace);
        }
        for (a, b) in runs[0].iter().zip(runs[1].iter()) {
            assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
            assert_eq!(a.0[1].to_bits(), b.0[1].to_bits());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
            assert_eq!(a.2, b.2);
        }
    }

    #[test]
    fn train_band_sampling_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let v = Body::BipedLike.sample_v_target(&mut rng);
            assert!((1.0..3.0).contains(&v));
            let v = Body::QuadLike.sample_v_target(&mut rng);
            assert!((0.5..1.5).contains(&v));
        }
    }
}
