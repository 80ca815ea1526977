//! Config files for `train` and `track`.

use std::path::Path;

use dualarm_core::agent::{AgentConfig, ConstraintMode};
use dualarm_core::env::EnvConfig;
use dualarm_core::harness::ScenarioConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Penalty,
    Lagrangian,
}

/// Either a named preset or a full environment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvChoice {
    Preset(String),
    Custom(Box<EnvConfig>),
}

impl EnvChoice {
    pub fn resolve(&self) -> Result<EnvConfig> {
        match self {
            EnvChoice::Preset(name) => preset(name),
            EnvChoice::Custom(c) => {
                c.validate()?;
                Ok((**c).clone())
            }
        }
    }
}

pub fn preset(name: &str) -> Result<EnvConfig> {
    match name {
        "planar" => Ok(EnvConfig::planar()),
        "dual_ur5" | "full" => Ok(EnvConfig::dual_ur5()),
        other => Err(CliError::Config(format!("unknown env preset `{other}` (planar, dual_ur5)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub lambda: f64,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianSection {
    pub lambda_init: f64,
    pub zeta: f64,
}

impl Default for LagrangianSection {
    fn default() -> Self {
        Self {
            lambda_init: 0.0,
            zeta: 0.01,
        }
    }
}

/// `train --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_env")]
    pub env: EnvChoice,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub penalty: PenaltySection,
    #[serde(default)]
    pub lagrangian: LagrangianSection,
    /// Greedy episodes run after training for the summary.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_env() -> EnvChoice {
    EnvChoice::Preset("planar".into())
}

fn default_eval_episodes() -> usize {
    50
}

impl TrainFile {
    /// Agent config with the constraint mode picked on the command line.
    pub fn agent_for(&self, mode: Mode) -> Result<AgentConfig> {
        let mut a = self.agent.clone();
        a.mode = match mode {
            Mode::Penalty => ConstraintMode::Penalty {
                lambda: self.penalty.lambda,
            },
            Mode::Lagrangian => ConstraintMode::Lagrangian {
                lambda_init: self.lagrangian.lambda_init,
                zeta: self.lagrangian.zeta,
            },
        };
        a.validate()?;
        Ok(a)
    }
}

/// What `train` records under `config/`; `eval` reads it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedTrain {
    pub name: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub eval_episodes: usize,
}

/// `track --config` file: scenario fields plus an optional environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_env")]
    pub env: EnvChoice,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.display().to_string())
        } else {
            CliError::Io(format!("{}: {e}", path.display()))
        }
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, toml::to_string_pretty(value)?)?;
    Ok(())
}
