//! Constrained hindsight experience replay.
//!
//! A deterministic goal-conditioned policy is trained against a reward critic
//! and a cost critic. The cost enters the policy objective either with a
//! fixed penalty coefficient or through a multiplier updated by dual ascent.

mod buffer;
mod config;
mod networks;
mod train;

pub use buffer::{her_relabel, ReplayBuffer, Transition};
pub use config::{AgentConfig, ConstraintMode};
pub use networks::{
    explore_action, multiplier_step, reward_target, Batch, CherAgent, CherNetworks, CriticLosses, FeatureMap,
    StepLosses,
};
pub use train::{
    build_agent, evaluate, read_train_log, rollout, train, write_train_log, EpisodeOutcome, TrainLogRow, TrainOutcome,
};

use thiserror::Error;

use crate::env::EnvError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("cannot relabel an empty episode")]
    EmptyEpisode,
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AgentError>;
