use serde::{Deserialize, Serialize};

use super::{AgentError, Result};

/// How the cost critic enters the policy objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConstraintMode {
    /// Fixed coefficient `λ_p`.
    Penalty { lambda: f64 },
    /// Multiplier `λ_l` adapted by dual ascent with step `zeta`.
    Lagrangian { lambda_init: f64, zeta: f64 },
}

impl ConstraintMode {
    pub fn initial_lambda(&self) -> f64 {
        match *self {
            ConstraintMode::Penalty { lambda } => lambda,
            ConstraintMode::Lagrangian { lambda_init, .. } => lambda_init,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintMode::Penalty { .. } => "penalty",
            ConstraintMode::Lagrangian { .. } => "lagrangian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma_r: f64,
    pub gamma_c: f64,
    /// Cost threshold `C_s`.
    pub cost_threshold: f64,
    pub mode: ConstraintMode,
    /// Gaussian exploration std in normalized action units.
    pub sigma: f64,
    /// Probability of a uniform random action while exploring.
    pub epsilon: f64,
    pub batch_size: usize,
    pub updates_per_episode: usize,
    /// Weight kept by the target nets per soft update.
    pub polyak: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub episodes: usize,
    /// Rollouts collected before each block of updates.
    pub rollouts_per_episode: usize,
    pub her: bool,
    /// Quadratic penalty on normalized policy actions.
    pub action_l2: f64,
    /// Scale applied to goal-minus-end-effector features.
    pub goal_delta_scale: f64,
    /// Write a checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
    /// Window for the rolling success rate in the training log.
    pub success_window: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma_r: 0.98,
            gamma_c: 0.98,
            cost_threshold: 1.0,
            mode: ConstraintMode::Penalty { lambda: 0.5 },
            sigma: 0.2,
            epsilon: 0.2,
            batch_size: 128,
            updates_per_episode: 40,
            polyak: 0.95,
            hidden: 64,
            hidden_layers: 2,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            buffer_capacity: 200_000,
            episodes: 500,
            rollouts_per_episode: 1,
            her: true,
            action_l2: 0.05,
            goal_delta_scale: 5.0,
            checkpoint_every: 0,
            success_window: 20,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma_r) || !(0.0..1.0).contains(&self.gamma_c) {
            return bad("discount factors must lie in [0, 1)");
        }
        if !self.cost_threshold.is_finite() {
            return bad("cost threshold must be finite");
        }
        match self.mode {
            ConstraintMode::Penalty { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                return bad("penalty coefficient must be non-negative")
            }
            ConstraintMode::Lagrangian { lambda_init, zeta } => {
                if !(lambda_init >= 0.0 && lambda_init.is_finite()) {
                    return bad("initial multiplier must be non-negative");
                }
                if !(zeta > 0.0 && zeta.is_finite()) {
                    return bad("multiplier step must be positive");
                }
            }
            _ => {}
        }
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.epsilon) {
            return bad("exploration noise must be non-negative and epsilon a probability");
        }
        if self.batch_size == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return bad("batch size and network widths must be positive");
        }
        if self.rollouts_per_episode == 0 {
            return bad("at least one rollout per episode is required");
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return bad("polyak rate must lie in [0, 1]");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be positive");
        }
        if !(self.action_l2 >= 0.0) || !(self.goal_delta_scale > 0.0) {
            return bad("action_l2 must be non-negative and goal_delta_scale positive");
        }
        if self.success_window == 0 {
            return bad("success window must be positive");
        }
        Ok(())
    }

    /// Lower clip for reward-critic targets: the return of `−1` forever.
    pub fn return_floor(&self) -> f64 {
        -1.0 / (1.0 - self.gamma_r)
    }
}
