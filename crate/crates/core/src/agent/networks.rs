use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{AgentConfig, AgentError, ConstraintMode, Result, Transition};
use crate::env::{GoalPair, Observation};
use crate::nn::{polyak_update, Activation, Adam, AdamConfig, Checkpoint, DenseNet, Gradients};

/// Maps an observation and goal pair to the network input:
/// `[sin Θ, cos Θ, Θ̇, p_e, p_g, s·(p_g − p_e)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub dofs: [usize; 2],
    pub goal_delta_scale: f64,
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        3 * (self.dofs[0] + self.dofs[1]) + 18
    }

    pub fn write(&self, obs: &Observation, goals: &GoalPair, out: &mut Vec<f64>) {
        for arm in 0..2 {
            out.extend(obs.joint_angles(arm).iter().map(|q| q.sin()));
            out.extend(obs.joint_angles(arm).iter().map(|q| q.cos()));
            out.extend(obs.joint_rates(arm));
        }
        for arm in 0..2 {
            out.extend(obs.ee(arm).iter());
        }
        out.extend(goals.flat());
        for arm in 0..2 {
            let d = (goals.0[arm] - obs.ee(arm)) * self.goal_delta_scale;
            out.extend(d.iter());
        }
    }

    pub fn features(&self, obs: &Observation, goals: &GoalPair) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        self.write(obs, goals, &mut v);
        v
    }
}

/// Minibatch in network layout, one transition per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub costs: Array1<f64>,
    pub next_features: Array2<f64>,
}

impl Batch {
    pub fn from_transitions(map: &FeatureMap, items: &[&Transition]) -> Self {
        let n = items.len();
        let w = map.width();
        let act = items.first().map_or(0, |t| t.action.len());
        let mut f = Vec::with_capacity(n * w);
        let mut nf = Vec::with_capacity(n * w);
        let mut a = Vec::with_capacity(n * act);
        for t in items {
            map.write(&t.obs, &t.goals, &mut f);
            map.write(&t.next_obs, &t.goals, &mut nf);
            a.extend(&t.action);
        }
        Self {
            features: Array2::from_shape_vec((n, w), f).expect("feature rows have equal width"),
            next_features: Array2::from_shape_vec((n, w), nf).expect("feature rows have equal width"),
            actions: Array2::from_shape_vec((n, act), a).expect("actions have equal width"),
            rewards: items.iter().map(|t| t.reward).collect(),
            costs: items.iter().map(|t| t.cost).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Policy `π(s, g; ψ)`, reward critic `Q^r(s, a, g; φ)`, cost critic
/// `Q^c(s, a, g; η)`, their targets and the multiplier `λ_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CherNetworks {
    pub policy: DenseNet,
    pub reward_critic: DenseNet,
    pub cost_critic: DenseNet,
    pub policy_target: DenseNet,
    pub reward_target: DenseNet,
    pub cost_target: DenseNet,
    pub lambda: f64,
    pub features: FeatureMap,
    /// Joint-rate bound that a normalized action of 1 maps to (rad/s).
    pub max_rate: f64,
}

fn init_net(widths: &[usize], output: Activation, seed: u64, last_gain: f64) -> DenseNet {
    let mut net = DenseNet::new(widths, Activation::Relu, output);
    net.orthogonal_init(seed, std::f64::consts::SQRT_2);
    let last = net.layers_mut().last_mut().unwrap();
    last.weight.mapv_inplace(|w| w * last_gain / std::f64::consts::SQRT_2);
    net.round_to_f32();
    net
}

fn widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat(hidden).take(layers));
    w.push(output);
    w
}

impl CherNetworks {
    pub fn new(map: FeatureMap, max_rate: f64, hidden: usize, hidden_layers: usize, lambda: f64, seed: u64) -> Self {
        let act = map.dofs[0] + map.dofs[1];
        let fw = map.width();
        let policy = init_net(&widths(fw, hidden, hidden_layers, act), Activation::Tanh, seed, 0.1);
        let reward_critic = init_net(&widths(fw + act, hidden, hidden_layers, 1), Activation::Identity, seed ^ 0x5151, 0.1);
        let cost_critic = init_net(&widths(fw + act, hidden, hidden_layers, 1), Activation::Identity, seed ^ 0xC0C0, 0.1);
        Self {
            policy_target: policy.clone(),
            reward_target: reward_critic.clone(),
            cost_target: cost_critic.clone(),
            policy,
            reward_critic,
            cost_critic,
            lambda,
            features: map,
            max_rate,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.policy.output_width()
    }

    /// Noise-free policy output `μ(s, g)` in normalized units.
    pub fn deterministic_action(&self, obs: &Observation, goals: &GoalPair) -> Result<Vec<f64>> {
        Ok(self.policy.forward_one(&self.features.features(obs, goals))?)
    }

    /// Converts normalized actions to joint-rate commands.
    pub fn to_command(&self, action: &[f64]) -> Vec<f64> {
        action.iter().map(|a| a * self.max_rate).collect()
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.policy,
            &self.reward_critic,
            &self.cost_critic,
            &self.policy_target,
            &self.reward_target,
            &self.cost_target,
        ]
        .iter()
        .all(|n| n.all_finite())
            && self.lambda.is_finite()
    }

    pub fn round_to_f32(&mut self) {
        for n in [
            &mut self.policy,
            &mut self.reward_critic,
            &mut self.cost_critic,
            &mut self.policy_target,
            &mut self.reward_target,
            &mut self.cost_target,
        ] {
            n.round_to_f32();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.metadata.insert("dofs".into(), format!("{},{}", self.features.dofs[0], self.features.dofs[1]));
        c.metadata.insert("goal_delta_scale".into(), format!("{:e}", self.features.goal_delta_scale));
        c.metadata.insert("max_rate".into(), format!("{:e}", self.max_rate));
        c.push_net("policy", &self.policy);
        c.push_net("reward_critic", &self.reward_critic);
        c.push_net("cost_critic", &self.cost_critic);
        c.push_net("policy_target", &self.policy_target);
        c.push_net("reward_target", &self.reward_target);
        c.push_net("cost_target", &self.cost_target);
        c.metadata.insert("lambda".into(), format!("{:e}", self.lambda));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| AgentError::Checkpoint(format!("missing metadata `{k}`")))
        };
        let parse = |k: &str| -> Result<f64> {
            meta(k)?
                .parse()
                .map_err(|_| AgentError::Checkpoint(format!("metadata `{k}` is not a number")))
        };
        let dofs: Vec<usize> = meta("dofs")?
            .split(',')
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AgentError::Checkpoint("metadata `dofs` is malformed".into()))?;
        if dofs.len() != 2 {
            return Err(AgentError::Checkpoint("metadata `dofs` needs two entries".into()));
        }
        let features = FeatureMap {
            dofs: [dofs[0], dofs[1]],
            goal_delta_scale: parse("goal_delta_scale")?,
        };
        let nets = Self {
            policy: c.net("policy")?,
            reward_critic: c.net("reward_critic")?,
            cost_critic: c.net("cost_critic")?,
            policy_target: c.net("policy_target")?,
            reward_target: c.net("reward_target")?,
            cost_target: c.net("cost_target")?,
            lambda: parse("lambda")?,
            features,
            max_rate: parse("max_rate")?,
        };
        let act = dofs[0] + dofs[1];
        if nets.policy.input_width() != features.width()
            || nets.policy.output_width() != act
            || nets.reward_critic.input_width() != features.width() + act
            || !nets.policy.same_architecture(&nets.policy_target)
            || !nets.reward_critic.same_architecture(&nets.reward_target)
            || !nets.cost_critic.same_architecture(&nets.cost_target)
        {
            return Err(AgentError::Checkpoint("network shapes do not match the feature layout".into()));
        }
        Ok(nets)
    }
}

/// Dual ascent step, clamped at zero.
pub fn multiplier_step(lambda: f64, zeta: f64, mean_violation: f64) -> f64 {
    (lambda + zeta * mean_violation).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLosses {
    pub reward: f64,
    pub cost: f64,
}

/// Networks plus optimizer state and hyperparameters.
#[derive(Debug, Clone)]
pub struct CherAgent {
    pub nets: CherNetworks,
    pub config: AgentConfig,
    policy_opt: Adam,
    reward_opt: Adam,
    cost_opt: Adam,
}

fn join(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), *a, *b]
}

impl CherAgent {
    pub fn new(nets: CherNetworks, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            policy_opt: Adam::for_net(&nets.policy, AdamConfig::with_lr(config.actor_lr)),
            reward_opt: Adam::for_net(&nets.reward_critic, AdamConfig::with_lr(config.critic_lr)),
            cost_opt: Adam::for_net(&nets.cost_critic, AdamConfig::with_lr(config.critic_lr)),
            nets,
            config,
        })
    }

    /// Behaviour action in normalized units. Without exploration this is
    /// exactly `μ(s, g)`.
    pub fn act(&self, obs: &Observation, goals: &GoalPair, explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mu = self.nets.deterministic_action(obs, goals)?;
        if !explore {
            return Ok(mu);
        }
        Ok(explore_action(&mu, self.config.sigma, self.config.epsilon, rng))
    }

    /// `(y_r, y_c)` per batch row from the target networks.
    pub fn critic_targets(&self, batch: &Batch) -> Result<(Array1<f64>, Array1<f64>)> {
        let n = &self.nets;
        let next_a = n.policy_target.forward(&batch.next_features)?;
        let sa = join(&batch.next_features, &next_a);
        let qr = n.reward_target.forward(&sa)?.column(0).to_owned();
        let qc = n.cost_target.forward(&sa)?.column(0).to_owned();
        let floor = self.config.return_floor();
        let yr = ndarray::Zip::from(&batch.rewards)
            .and(&qr)
            .map_collect(|&r, &q| reward_target(r, q, self.config.gamma_r, floor));
        let yc = ndarray::Zip::from(&batch.costs)
            .and(&qc)
            .map_collect(|&c, &q| (c + self.config.gamma_c * q).max(0.0));
        Ok((yr, yc))
    }

    /// One Adam step on each critic against its TD target. Returns the
    /// pre-update mean squared errors.
    pub fn update_critics(&mut self, batch: &Batch) -> Result<CriticLosses> {
        let [(lr, gr), (lc, gc)] = self.critic_objectives(batch)?;
        if !lr.is_finite() || !lc.is_finite() {
            return Err(AgentError::Divergence(format!("critic loss reward={lr} cost={lc}")));
        }
        self.reward_opt.step_net(&mut self.nets.reward_critic, &gr)?;
        self.cost_opt.step_net(&mut self.nets.cost_critic, &gc)?;
        Ok(CriticLosses { reward: lr, cost: lc })
    }

    /// Squared TD error and its parameter gradient for the reward critic and
    /// the cost critic, targets held fixed.
    pub fn critic_objectives(&self, batch: &Batch) -> Result<[(f64, Gradients); 2]> {
        let (yr, yc) = self.critic_targets(batch)?;
        let sa = join(&batch.features, &batch.actions);
        Ok([
            mse_gradients(&self.nets.reward_critic, &sa, &yr)?,
            mse_gradients(&self.nets.cost_critic, &sa, &yc)?,
        ])
    }

    /// Value and ψ-gradient of
    /// `E[−Q^r(s, π(s,g), g) + λ(Q^c(s, π(s,g), g) − C_s)] + l2·E[‖π‖²]`
    /// with the critics held fixed.
    pub fn policy_objective(&self, features: &Array2<f64>, lambda: f64) -> Result<(f64, Gradients)> {
        let n = &self.nets;
        let b = features.nrows() as f64;
        let fw = features.ncols();
        let pc = n.policy.forward_cached(features)?;
        let a = pc.output();
        let sa = join(features, a);
        let rc = n.reward_critic.forward_cached(&sa)?;
        let cc = n.cost_critic.forward_cached(&sa)?;
        let l2 = self.config.action_l2;
        let qr_mean = rc.output().mean().unwrap_or(0.0);
        let qc_mean = cc.output().mean().unwrap_or(0.0);
        let loss = -qr_mean + lambda * (qc_mean - self.config.cost_threshold) + l2 * a.mapv(|v| v * v).sum() / b;

        let ones = Array2::from_elem((features.nrows(), 1), 1.0 / b);
        let dr = n.reward_critic.input_gradient(&rc, &(-&ones))?;
        let mut da = dr.slice(s![.., fw..]).to_owned();
        if lambda != 0.0 {
            let dc = n.cost_critic.input_gradient(&cc, &(&ones * lambda))?;
            da += &dc.slice(s![.., fw..]);
        }
        if l2 != 0.0 {
            da.scaled_add(2.0 * l2 / b, a);
        }
        let grads = n.policy.backward(&pc, &da)?;
        Ok((loss, grads))
    }

    fn update_policy(&mut self, batch: &Batch, lambda: f64) -> Result<f64> {
        let (loss, grads) = self.policy_objective(&batch.features, lambda)?;
        if !loss.is_finite() {
            return Err(AgentError::Divergence(format!("policy loss {loss}")));
        }
        self.policy_opt.step_net(&mut self.nets.policy, &grads)?;
        Ok(loss)
    }

    pub fn update_policy_penalty(&mut self, batch: &Batch, lambda_p: f64) -> Result<f64> {
        self.update_policy(batch, lambda_p)
    }

    pub fn update_policy_lagrangian(&mut self, batch: &Batch) -> Result<f64> {
        self.update_policy(batch, self.nets.lambda)
    }

    /// `mean(Q^c(s, π(s,g), g)) − C_s` on the batch.
    pub fn cost_violation(&self, batch: &Batch) -> Result<f64> {
        let a = self.nets.policy.forward(&batch.features)?;
        let qc = self.nets.cost_critic.forward(&join(&batch.features, &a))?;
        Ok(qc.mean().unwrap_or(0.0) - self.config.cost_threshold)
    }

    /// Dual ascent on `λ_l`. Returns the violation that drove the step.
    pub fn update_multiplier(&mut self, batch: &Batch, zeta: f64) -> Result<f64> {
        let v = self.cost_violation(batch)?;
        self.nets.lambda = multiplier_step(self.nets.lambda, zeta, v);
        Ok(v)
    }

    /// Soft target update followed by rounding every parameter to `f32`.
    pub fn soft_update(&mut self) -> Result<()> {
        let p = self.config.polyak;
        let n = &mut self.nets;
        polyak_update(&mut n.policy_target, &n.policy, p)?;
        polyak_update(&mut n.reward_target, &n.reward_critic, p)?;
        polyak_update(&mut n.cost_target, &n.cost_critic, p)?;
        n.round_to_f32();
        Ok(())
    }

    /// One optimization iteration: critics, policy, multiplier, targets.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let critic = self.update_critics(batch)?;
        let (policy, violation) = match self.config.mode {
            ConstraintMode::Penalty { lambda } => (self.update_policy_penalty(batch, lambda)?, self.cost_violation(batch)?),
            ConstraintMode::Lagrangian { zeta, .. } => {
                let loss = self.update_policy_lagrangian(batch)?;
                (loss, self.update_multiplier(batch, zeta)?)
            }
        };
        self.soft_update()?;
        if !self.nets.all_finite() {
            return Err(AgentError::Divergence("non-finite network parameters".into()));
        }
        Ok(StepLosses {
            reward_critic: critic.reward,
            cost_critic: critic.cost,
            policy,
            violation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub reward_critic: f64,
    pub cost_critic: f64,
    pub policy: f64,
    pub violation: f64,
}

/// `clip(r + γ q′, floor, 0)`.
pub fn reward_target(reward: f64, next_q: f64, gamma: f64, floor: f64) -> f64 {
    (reward + gamma * next_q).clamp(floor, 0.0)
}

/// `μ + N(0, σ²)` clipped to `[-1, 1]`, replaced with probability `ε` by a
/// uniform action.
pub fn explore_action(mu: &[f64], sigma: f64, epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return mu.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect();
    }
    mu.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            (m + sigma * z).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Mean squared error of a single-output net and its parameter gradients.
fn mse_gradients(net: &DenseNet, input: &Array2<f64>, target: &Array1<f64>) -> Result<(f64, Gradients)> {
    let cache = net.forward_cached(input)?;
    let pred = cache.output().column(0);
    let b = target.len() as f64;
    let diff = &pred - target;
    let loss = diff.mapv(|d| d * d).sum() / b;
    let upstream = (diff * (2.0 / b)).insert_axis(Axis(1));
    let grads = net.backward(&cache, &upstream)?;
    Ok((loss, grads))
}
