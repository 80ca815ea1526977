use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{her_relabel, AgentConfig, AgentError, Batch, CherAgent, CherNetworks, FeatureMap, ReplayBuffer, Result, Transition};
use crate::env::{Env, GoalPair};

/// What one rollout produced.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub transitions: Vec<Transition>,
    /// `(e₁, e₂)` after every step.
    pub errors: Vec<[f64; 2]>,
    pub success: bool,
    /// `Σ γ_c^t c_t`.
    pub cost_value: f64,
    pub collisions: usize,
}

impl EpisodeOutcome {
    pub fn final_errors(&self) -> [f64; 2] {
        self.errors.last().copied().unwrap_or([f64::NAN; 2])
    }

    pub fn mean_errors(&self) -> [f64; 2] {
        let n = self.errors.len().max(1) as f64;
        let s = self.errors.iter().fold([0.0; 2], |a, e| [a[0] + e[0], a[1] + e[1]]);
        [s[0] / n, s[1] / n]
    }
}

/// Runs one full-horizon episode from `env.reset(seed)` (or the given goals).
pub fn rollout(
    env: &mut Env,
    agent: &CherAgent,
    seed: u64,
    goals: Option<GoalPair>,
    explore: bool,
    rng: &mut impl Rng,
) -> Result<EpisodeOutcome> {
    let (mut obs, goals) = match goals {
        Some(g) => env.reset_with_goals(seed, g),
        None => env.reset(seed),
    };
    run_from(env, agent, &mut obs, goals, explore, agent.config.gamma_c, rng)
}

fn run_from(
    env: &mut Env,
    agent: &CherAgent,
    obs: &mut crate::env::Observation,
    goals: GoalPair,
    explore: bool,
    gamma_c: f64,
    rng: &mut impl Rng,
) -> Result<EpisodeOutcome> {
    let horizon = env.config().horizon;
    let mut out = EpisodeOutcome {
        transitions: Vec::with_capacity(horizon),
        errors: Vec::with_capacity(horizon),
        success: false,
        cost_value: 0.0,
        collisions: 0,
    };
    let mut discount = 1.0;
    while !env.done() {
        let action = agent.act(obs, &goals, explore, rng)?;
        let step = env.step(&agent.nets.to_command(&action))?;
        out.cost_value += discount * step.cost;
        discount *= gamma_c;
        out.errors.push(step.errors);
        out.collisions += step.collision as usize;
        out.success = step.success;
        out.transitions.push(Transition {
            obs: std::mem::replace(obs, step.observation.clone()),
            action,
            goals,
            reward: step.reward,
            cost: step.cost,
            next_obs: step.observation,
            achieved: env.state().ee_positions,
            final_step: env.done(),
        });
    }
    Ok(out)
}

/// Greedy evaluation over the given reset seeds.
pub fn evaluate(env: &mut Env, agent: &CherAgent, seeds: &[u64]) -> Result<Vec<EpisodeOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    seeds
        .iter()
        .map(|&s| rollout(env, agent, s, None, false, &mut rng))
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub mean_e1: f64,
    pub mean_e2: f64,
    /// Final-step success over the trailing window of training rollouts.
    pub success_rate: f64,
    pub cost_value: f64,
    pub lambda: f64,
    pub reward_critic_loss: f64,
    pub cost_critic_loss: f64,
    pub policy_loss: f64,
    /// Mean of `Q^c(s, π(s,g), g) − C_s` over this episode's updates.
    pub cost_violation: f64,
}

pub fn write_train_log(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_log(path: impl AsRef<Path>) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: CherAgent,
    pub log: Vec<TrainLogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fresh agent sized to `env`.
pub fn build_agent(env: &Env, config: &AgentConfig, seed: u64) -> Result<CherAgent> {
    let dofs = env.observation().dofs();
    let map = FeatureMap {
        dofs,
        goal_delta_scale: config.goal_delta_scale,
    };
    let nets = CherNetworks::new(
        map,
        env.config().sim.limits.max_rate,
        config.hidden,
        config.hidden_layers,
        config.mode.initial_lambda(),
        seed,
    );
    CherAgent::new(nets, config.clone())
}

/// The CHER loop: explore, store original and relabeled transitions,
/// optimize, repeat.
pub fn train(env: &mut Env, config: &AgentConfig, seed: u64, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut agent = build_agent(env, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let thresholds = env.config().thresholds;
    let mut log = Vec::with_capacity(config.episodes);
    let mut recent = std::collections::VecDeque::with_capacity(config.success_window);
    let mut checkpoints = Vec::new();

    for episode in 0..config.episodes {
        let mut errs = [0.0; 2];
        let mut cost_value = 0.0;
        for _ in 0..config.rollouts_per_episode {
            let reset_seed: u64 = rng.gen();
            let out = rollout(env, &agent, reset_seed, None, true, &mut rng)?;
            let m = out.mean_errors();
            errs[0] += m[0];
            errs[1] += m[1];
            cost_value += out.cost_value;
            if recent.len() == config.success_window {
                recent.pop_front();
            }
            recent.push_back(out.success);
            let relabeled = if config.her {
                her_relabel(&out.transitions, thresholds)?
            } else {
                Vec::new()
            };
            buffer.extend(out.transitions);
            buffer.extend(relabeled);
        }
        let k = config.rollouts_per_episode as f64;

        let mut sums = [0.0; 4];
        let mut updates = 0usize;
        if buffer.len() >= config.batch_size {
            for _ in 0..config.updates_per_episode {
                let items = buffer.sample(config.batch_size, &mut rng)?;
                let batch = Batch::from_transitions(&agent.nets.features, &items);
                let l = agent.train_step(&batch).map_err(|e| match e {
                    AgentError::Divergence(m) => AgentError::Divergence(format!("episode {episode}: {m}")),
                    other => other,
                })?;
                sums[0] += l.reward_critic;
                sums[1] += l.cost_critic;
                sums[2] += l.policy;
                sums[3] += l.violation;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        log.push(TrainLogRow {
            episode,
            mean_e1: errs[0] / k,
            mean_e2: errs[1] / k,
            success_rate: recent.iter().filter(|s| **s).count() as f64 / recent.len() as f64,
            cost_value: cost_value / k,
            lambda: agent.nets.lambda,
            reward_critic_loss: sums[0] / u,
            cost_critic_loss: sums[1] / u,
            policy_loss: sums[2] / u,
            cost_violation: sums[3] / u,
        });

        if let Some(dir) = checkpoint_dir {
            let last = episode + 1 == config.episodes;
            if last || (config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0) {
                let path = dir.join(format!("episode_{:06}.ckpt", episode + 1));
                agent.nets.to_checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        agent,
        log,
        checkpoints,
    })
}
