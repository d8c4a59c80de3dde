//! Zero-shot evaluation protocols: the target-speed sweep for locomotion
//! agents and the maze suite for navigation agents, with CSV reports.

use std::path::Path;

use crate::envs::{
    ArenaKind, RewardVariant, TaskSpec, MAZE_EVAL_EPISODE_LEN, TOUCH_RADIUS, TRAIN_EPISODE_LEN,
};
use crate::error::HgcpError;
use crate::numerics::derive_seed;
use crate::Result;

use super::{
    collect_episode, count_targets_reached, first_touch_events, fixed_target_success, Agent,
    Episode, TaskFamily,
};

/// A zero-shot evaluation protocol. Specs are built per point from the
/// agent's task family; a family mismatch is a config error.
#[derive(Debug, Clone)]
pub enum EvalProtocol {
    /// Locomotion: one row per target speed, including speeds outside the
    /// training band.
    SpeedSweep {
        grid: Vec<f64>,
        episodes_per_point: usize,
        episode_len: usize,
    },
    /// Navigation: one row per arena under the sparse eval reward.
    MazeSuite {
        arenas: Vec<ArenaKind>,
        episodes_per_arena: usize,
        episode_len: usize,
    },
}

impl EvalProtocol {
    /// The standard sweep: 33 points over [0, sweep_max].
    pub fn standard_sweep(sweep_max: f64) -> EvalProtocol {
        let n = 33;
        EvalProtocol::SpeedSweep {
            grid: (0..n)
                .map(|i| sweep_max * i as f64 / (n - 1) as f64)
                .collect(),
            episodes_per_point: 10,
            episode_len: TRAIN_EPISODE_LEN,
        }
    }

    /// The standard maze suite: every arena, ten episodes each.
    pub fn standard_mazes() -> EvalProtocol {
        EvalProtocol::MazeSuite {
            arenas: vec![
                ArenaKind::Box5,
                ArenaKind::Box9,
                ArenaKind::LMaze,
                ArenaKind::SMaze,
            ],
            episodes_per_arena: 10,
            episode_len: MAZE_EVAL_EPISODE_LEN,
        }
    }
}

/// One sweep point.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub v_target: f64,
    pub mean_return: f64,
    /// Mean per-step absolute speed-tracking error.
    pub mean_speed_err: f64,
}

/// One maze-suite row. Respawning arenas report the mean number of
/// targets reached per episode plus the mean steps between touches;
/// fixed-target arenas report the success rate plus the mean steps to
/// the first touch over successful episodes.
#[derive(Debug, Clone)]
pub struct MazeRow {
    pub arena: ArenaKind,
    pub respawning: bool,
    pub targets_or_success: f64,
    pub steps: Option<f64>,
}

/// A completed zero-shot evaluation.
#[derive(Debug, Clone)]
pub enum EvalReport {
    Sweep(Vec<SweepRow>),
    Maze(Vec<MazeRow>),
}

impl EvalReport {
    /// Render as CSV (the same bytes `run_zero_shot_eval` writes).
    pub fn to_csv(&self) -> String {
        match self {
            EvalReport::Sweep(rows) => {
                let mut s = String::from("v_target,mean_return,mean_speed_err\n");
                for r in rows {
                    s.push_str(&format!("{},{},{}\n", r.v_target, r.mean_return, r.mean_speed_err));
                }
                s
            }
            EvalReport::Maze(rows) => {
                let mut s = String::from("arena,respawning,targets_or_success,steps\n");
                for r in rows {
                    s.push_str(&format!(
                        "{},{},{},{}\n",
                        r.arena.name(),
                        r.respawning,
                        r.targets_or_success,
                        r.steps.map(|v| v.to_string()).unwrap_or_default()
                    ));
                }
                s
            }
        }
    }
}

/// Every reward in a sparse-eval episode must be one of the two reward
/// constants; anything else indicates a broken protocol.
fn audit_eval_rewards(ep: &Episode) -> Result<()> {
    for (t, r) in ep.rewards.iter().enumerate() {
        if *r != -8.0 && *r != -0.5 {
            return Err(HgcpError::Protocol(format!(
                "eval reward at step {t} is {r}, expected -8 or -0.5"
            )));
        }
    }
    Ok(())
}

/// Run a zero-shot protocol with the policy in deterministic eval mode.
/// Writes `sweep.csv` or `maze_report.csv` under `out_dir` when given.
pub fn run_zero_shot_eval(
    agent: &Agent,
    protocol: &EvalProtocol,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let report = match protocol {
        EvalProtocol::SpeedSweep {
            grid,
            episodes_per_point,
            episode_len,
        } => {
            let TaskFamily::Locomotion(body) = agent.family else {
                return Err(HgcpError::Config(format!(
                    "speed sweep requires a locomotion agent, got {}",
                    agent.family.name()
                )));
            };
            if grid.is_empty() || *episodes_per_point == 0 {
                return Err(HgcpError::Config("empty sweep grid".into()));
            }
            let mut rows = Vec::with_capacity(grid.len());
            for (i, &v) in grid.iter().enumerate() {
                let spec = TaskSpec::locomotion(v, body, *episode_len)?;
                let mut sum_ret = 0.0;
                let mut sum_err = 0.0;
                for e in 0..*episodes_per_point {
                    let s =
                        derive_seed(seed, "sweep", (i * episodes_per_point + e) as u64);
                    let ep = collect_episode(agent, &spec, s, true, None)?;
                    sum_ret += ep.ret();
                    sum_err += ep.speeds.iter().map(|sp| (sp - v).abs()).sum::<f64>()
                        / ep.len() as f64;
                }
                rows.push(SweepRow {
                    v_target: v,
                    mean_return: sum_ret / *episodes_per_point as f64,
                    mean_speed_err: sum_err / *episodes_per_point as f64,
                });
            }
            EvalReport::Sweep(rows)
        }
        EvalProtocol::MazeSuite {
            arenas,
            episodes_per_arena,
            episode_len,
        } => {
            if agent.family != TaskFamily::Navigation {
                return Err(HgcpError::Config(format!(
                    "maze suite requires a navigation agent, got {}",
                    agent.family.name()
                )));
            }
            if arenas.is_empty() || *episodes_per_arena == 0 {
                return Err(HgcpError::Config("empty maze suite".into()));
            }
            let mut rows = Vec::with_capacity(arenas.len());
            for (i, &arena) in arenas.iter().enumerate() {
                let spec =
                    TaskSpec::navigation(arena, RewardVariant::EvalConstant, *episode_len)?;
                let respawning = arena.target_respawn();
                let mut metric = 0.0;
                let mut steps_sum = 0.0;
                let mut steps_n = 0usize;
                for e in 0..*episodes_per_arena {
                    let s = derive_seed(seed, "maze", (i * episodes_per_arena + e) as u64);
                    let ep = collect_episode(agent, &spec, s, true, None)?;
                    audit_eval_rewards(&ep)?;
                    if respawning {
                        let touched = count_targets_reached(&ep, TOUCH_RADIUS)?;
                        debug_assert_eq!(touched, first_touch_events(&ep));
                        metric += touched as f64;
                        if touched > 0 {
                            steps_sum += ep.len() as f64 / touched as f64;
                            steps_n += 1;
                        }
                    } else {
                        let (ok, steps) = fixed_target_success(&ep, TOUCH_RADIUS);
                        if ok {
                            metric += 1.0;
                            steps_sum += steps.expect("successful episode has a step") as f64;
                            steps_n += 1;
                        }
                    }
                }
                rows.push(MazeRow {
                    arena,
                    respawning,
                    targets_or_success: metric / *episodes_per_arena as f64,
                    steps: if steps_n > 0 {
                        Some(steps_sum / steps_n as f64)
                    } else {
                        None
                    },
                });
            }
            EvalReport::Maze(rows)
        }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let name = match report {
            EvalReport::Sweep(_) => "sweep.csv",
            EvalReport::Maze(_) => "maze_report.csv",
        };
        std::fs::write(dir.join(name), report.to_csv())?;
    }
    Ok(report)
}

/// Parse a sweep grid given as `lo:hi:step` (inclusive endpoints).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(HgcpError::Config(format!(
            "grid `{text}` must have the form lo:hi:step"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| HgcpError::Config(format!("bad grid lo `{}`", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| HgcpError::Config(format!("bad grid hi `{}`", parts[1])))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|_| HgcpError::Config(format!("bad grid step `{}`", parts[2])))?;
    if step <= 0.0 || hi < lo {
        return Err(HgcpError::Config(format!("degenerate grid `{text}`")));
    }
    let mut grid = Vec::new();
    let mut v = lo;
    while v <= hi + 1e-9 {
        grid.push(v.min(hi));
        v += step;
    }
    Ok(grid)
}

/// List of arena names, comma-separated.
pub fn parse_arenas(text: &str) -> Result<Vec<ArenaKind>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(ArenaKind::parse)
        .collect()
}
