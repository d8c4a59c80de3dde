//! Command-line front end: train agents, run zero-shot evaluations,
//! fine-tune under freeze masks, sweep the goal horizon, and render
//! metrics CSVs as SVG plots.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hgcp::agents::AgentKind;
use hgcp::config::Config;
use hgcp::envs::{ArenaKind, MAZE_EVAL_EPISODE_LEN, TRAIN_EPISODE_LEN};
use hgcp::error::HgcpError;
use hgcp::harness::eval::{parse_arenas, parse_grid, run_zero_shot_eval, EvalProtocol, EvalReport};
use hgcp::harness::plots::{emit_plots, PlotSpec};
use hgcp::harness::train::{
    run_finetune, run_horizon_ablation, run_training, FinetuneConfig,
};
use hgcp::harness::{Agent, FreezeMask, ModelDims, RunConfig, TaskFamily};

#[derive(Parser)]
#[command(name = "hgcp", version, about = "Hierarchical world-model agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a config file.
    Train {
        /// Plain-text key = value config (supports include directives).
        #[arg(long)]
        config: PathBuf,
        /// Seed override; the config's `seed` key wins if present.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the manifest, metrics, and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation of a checkpoint.
    Eval {
        /// Checkpoint prefix (the path saved as <prefix>.ckpt/.meta).
        #[arg(long)]
        ckpt: PathBuf,
        /// `speed` for the target-speed sweep, `maze` for the maze suite.
        #[arg(long)]
        protocol: String,
        /// Sweep grid lo:hi:step (speed protocol).
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated arena list (maze protocol).
        #[arg(long)]
        arenas: Option<String>,
        /// Episodes per grid point / arena.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Episode length override.
        #[arg(long)]
        episode_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the report CSV (printed to stdout regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint (or a fresh agent) on a held-out maze.
    Finetune {
        /// Checkpoint prefix to adapt; omit to train from scratch.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Agent kind when starting from scratch.
        #[arg(long)]
        scratch: Option<String>,
        /// Comma-separated families to freeze: wm, mgr, vae, wrk.
        #[arg(long, default_value = "")]
        freeze: String,
        /// Target arena.
        #[arg(long)]
        arena: String,
        /// Eval-return threshold, or `auto` for the scripted-walker bar.
        #[arg(long, default_value = "auto")]
        threshold: String,
        #[arg(long, default_value_t = 20_000)]
        max_steps: usize,
        #[arg(long, default_value_t = 1_000)]
        eval_every: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent per goal horizon and tabulate final returns.
    AblateHorizon {
        /// Base training config (must be hierarchical).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated horizons.
        #[arg(long, default_value = "1,2,4,8,16,32")]
        k: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render CSV columns as a deterministic SVG line plot.
    Plot {
        /// CSV files; each becomes one series named by its file stem.
        #[arg(long, required = true, num_args = 1..)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "env_step")]
        x: String,
        #[arg(long, default_value = "eval_return")]
        y: String,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> hgcp::Result<()> {
    match command {
        Command::Train { config, seed, out } => {
            let cfg = Config::from_file(&config)?;
            let rc = RunConfig::from_config(&cfg, seed, out)?;
            let (_, report) = run_training(&rc)?;
            println!(
                "trained {} episodes / {} updates; final eval return {}",
                report.episodes, report.updates, report.final_eval
            );
            println!("metrics: {}", report.metrics_path.display());
            println!("checkpoint: {}", report.ckpt_prefix.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            protocol,
            grid,
            arenas,
            episodes,
            episode_len,
            seed,
            out,
        } => {
            let agent = Agent::load(&ckpt)?;
            let protocol = match protocol.as_str() {
                "speed" => {
                    let grid = match grid {
                        Some(g) => parse_grid(&g)?,
                        None => {
                            let TaskFamily::Locomotion(body) = agent.family else {
                                return Err(HgcpError::Config(
                                    "speed sweep requires a locomotion checkpoint".into(),
                                ));
                            };
                            let EvalProtocol::SpeedSweep { grid, .. } =
                                EvalProtocol::standard_sweep(body.sweep_max())
                            else {
                                unreachable!("standard_sweep builds a sweep");
                            };
                            grid
                        }
                    };
                    EvalProtocol::SpeedSweep {
                        grid,
                        episodes_per_point: episodes,
                        episode_len: episode_len.unwrap_or(TRAIN_EPISODE_LEN),
                    }
                }
                "maze" => {
                    let arenas = match arenas {
                        Some(a) => parse_arenas(&a)?,
                        None => vec![
                            ArenaKind::Box5,
                            ArenaKind::Box9,
                            ArenaKind::LMaze,
                            ArenaKind::SMaze,
                        ],
                    };
                    EvalProtocol::MazeSuite {
                        arenas,
                        episodes_per_arena: episodes,
                        episode_len: episode_len.unwrap_or(MAZE_EVAL_EPISODE_LEN),
                    }
                }
                other => {
                    return Err(HgcpError::Config(format!(
                        "unknown protocol `{other}` (use speed or maze)"
                    )));
                }
            };
            let report = run_zero_shot_eval(&agent, &protocol, seed, out.as_deref())?;
            print!("{}", report.to_csv());
            if let EvalReport::Maze(rows) = &report {
                for r in rows {
                    if r.respawning {
                        println!(
                            "# {}: {} targets reached per episode",
                            r.arena.name(),
                            r.targets_or_success
                        );
                    } else {
                        println!(
                            "# {}: success rate {}",
                            r.arena.name(),
                            r.targets_or_success
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Finetune {
            ckpt,
            scratch,
            freeze,
            arena,
            threshold,
            max_steps,
            eval_every,
            seed,
            out,
        } => {
            let agent = match (ckpt, scratch) {
                (Some(prefix), None) => Agent::load(&prefix)?,
                (None, Some(kind)) => {
                    let cfg = match kind.as_str() {
                        "hierarchical" => hgcp::agents::AgentConfig::hierarchical(),
                        "flat" => hgcp::agents::AgentConfig::flat(),
                        other => {
                            return Err(HgcpError::Config(format!(
                                "unknown agent kind `{other}`"
                            )));
                        }
                    };
                    Agent::new(cfg, ModelDims::default(), TaskFamily::Navigation, seed)?
                }
                _ => {
                    return Err(HgcpError::Config(
                        "pass exactly one of --ckpt or --scratch".into(),
                    ));
                }
            };
            let fc = FinetuneConfig {
                mask: FreezeMask::parse(&freeze)?,
                arena: ArenaKind::parse(&arena)?,
                threshold: match threshold.as_str() {
                    "auto" => None,
                    t => Some(t.parse().map_err(|_| {
                        HgcpError::Config(format!("bad threshold `{t}`"))
                    })?),
                },
                max_steps,
                eval_every,
                seed,
                out_dir: out,
                ..FinetuneConfig::new(ArenaKind::parse(&arena)?, PathBuf::new())
            };
            let (_, report) = run_finetune(agent, &fc)?;
            match report.steps_to_threshold {
                Some(steps) => println!(
                    "threshold {} reached after {steps} env steps",
                    report.threshold
                ),
                None => println!(
                    "threshold {} not reached within {max_steps} env steps",
                    report.threshold
                ),
            }
            println!("curve: {}", report.csv_path.display());
            Ok(())
        }
        Command::AblateHorizon {
            config,
            k,
            seed,
            out,
        } => {
            let cfg = Config::from_file(&config)?;
            let base = RunConfig::from_config(&cfg, seed, out)?;
            if base.agent.kind != AgentKind::Hierarchical {
                return Err(HgcpError::Config(
                    "the horizon ablation needs a hierarchical config".into(),
                ));
            }
            let ks = k
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| HgcpError::Config(format!("bad horizon `{t}`")))
                })
                .collect::<hgcp::Result<Vec<_>>>()?;
            let rows = run_horizon_ablation(&base, &ks)?;
            println!("goal_horizon,final_eval_return");
            for (k, ret) in rows {
                println!("{k},{ret}");
            }
            Ok(())
        }
        Command::Plot {
            csv,
            x,
            y,
            title,
            out,
        } => {
            let series: Vec<(String, PathBuf)> = csv
                .into_iter()
                .map(|p| {
                    let name = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.display().to_string());
                    (name, p)
                })
                .collect();
            let title = if title.is_empty() {
                format!("{y} vs {x}")
            } else {
                title
            };
            let mut spec = PlotSpec::new(&title, &x, &y);
            spec.x_label = x;
            spec.y_label = y;
            emit_plots(&series, &spec, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
