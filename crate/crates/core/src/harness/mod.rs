//! Experiment orchestration: alternating, single-task and self-play runs,
//! snapshots, tournaments and summary statistics.

mod agent;
pub mod config;
mod eval;
pub mod metrics;
mod selfplay;
pub mod snapshot;
mod train;

pub use agent::{seeded_stream, Agent, AgentError};
pub use config::{load_config, resolve_str, AgentKind, ConfigError, ExperimentConfig, Protocol, SelfPlayConfig};
pub use eval::{eval_hidden_depths, evaluate_policy, final_average_reward, forgetting_metric, mean_action, DepthReward};
pub use metrics::{write_csv, ErrorRow, MetricsRow};
pub use selfplay::{
    curriculum_alpha, curriculum_horizon, evaluate_match, mean_score, run_selfplay, tournament_vs_history, Contestant,
    MatchResult, TournamentRow, TOURNAMENT_HEADER,
};
pub use snapshot::{Snapshot, SnapshotError};
pub use train::{run, run_alternating, run_single, RunOutput, RunSummary};

use thiserror::Error;

use crate::diffnet::DiffError;
use crate::envs::EnvError;
use crate::ppo::UpdateError;
use crate::rollout::RolloutError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] DiffError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("update {iteration} failed: {source}")]
    Update { iteration: u64, source: UpdateError },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("expected a pc snapshot, found '{0}'")]
    NotCascade(String),
    #[error("{0}")]
    Protocol(String),
}
