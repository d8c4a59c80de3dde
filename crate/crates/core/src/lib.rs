//! Desk-scale framework for training and evaluating task-conditioned
//! hierarchical (manager/worker) and flat agents on a learned latent
//! world model.
//!
//! The crate is organized around six subsystems:
//!
//! * [`numerics`] — reverse-mode tape, parameter store, Adam, checkpoints
//! * [`envs`] — locomotion and maze-navigation environments
//! * [`worldmodel`] — latent dynamics model with reward conditioning
//! * [`goalvae`] — categorical VAE over model states (the manager's action space)
//! * [`agents`] — manager, goal-conditioned worker, flat baseline
//! * [`harness`] — replay, training/eval/fine-tune protocols, metrics, plots

pub mod agents;
pub mod config;
pub mod envs;
pub mod error;
pub mod goalvae;
pub mod harness;
pub mod numerics;
pub mod worldmodel;

pub use error::HgcpError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, HgcpError>;
