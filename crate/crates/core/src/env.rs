//! Goal-conditioned constrained MDP over the simulator.
//!
//! Reward is sparse: `0` when both end-effectors are within their thresholds
//! of the goals, `−1` otherwise. Cost penalizes base drift from its initial
//! pose, weighted by the step index.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ChainConfig, DynamicsError, SimConfig, Simulator, SystemState};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} action values, found {found}")]
    ActionDimension { expected: usize, found: usize },
    #[error("episode exhausted after {0} steps")]
    Exhausted(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Axis-aligned box in the inertial frame (m). Degenerate extents are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            if self.max[i] > self.min[i] {
                rng.gen_range(self.min[i]..=self.max[i])
            } else {
                self.min[i]
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub chain: ChainConfig,
    #[serde(default)]
    pub sim: SimConfig,
    /// Joint angles every episode starts from.
    pub home: [Vec<f64>; 2],
    pub workspaces: [Workspace; 2],
    /// Success radius of each end-effector (m).
    #[serde(default = "default_thresholds")]
    pub thresholds: [f64; 2],
    #[serde(default = "default_cost_scale")]
    pub cost_scale: f64,
    /// Weight of the base orientation angle (rad) against translation (m).
    #[serde(default = "default_orientation_weight")]
    pub orientation_weight: f64,
    pub horizon: usize,
}

fn default_thresholds() -> [f64; 2] {
    [0.05, 0.05]
}

fn default_cost_scale() -> f64 {
    0.1
}

fn default_orientation_weight() -> f64 {
    0.5
}

impl EnvConfig {
    /// Two 2-link planar arms on a 100 kg base.
    pub fn planar() -> Self {
        Self {
            chain: ChainConfig::default_planar(),
            sim: SimConfig::default(),
            home: [vec![0.6, -1.2], vec![-0.6, 1.2]],
            workspaces: [
                Workspace {
                    min: [0.8, -0.2, 0.0],
                    max: [1.3, 0.6, 0.0],
                },
                Workspace {
                    min: [0.8, -0.6, 0.0],
                    max: [1.3, 0.2, 0.0],
                },
            ],
            thresholds: default_thresholds(),
            cost_scale: 0.1,
            orientation_weight: 0.5,
            horizon: 60,
        }
    }

    /// Two 6-DoF UR5-like arms on a 400 kg base.
    pub fn dual_ur5() -> Self {
        let home = vec![0.17, -0.49, -2.48, -0.06, 3.14, 0.0];
        Self {
            chain: ChainConfig::default_dual_ur5(),
            sim: SimConfig::default(),
            home: [home.clone(), home],
            workspaces: [
                Workspace {
                    min: [0.75, 0.1, -0.25],
                    max: [1.15, 0.6, 0.25],
                },
                Workspace {
                    min: [0.75, -0.6, -0.25],
                    max: [1.15, -0.1, 0.25],
                },
            ],
            thresholds: default_thresholds(),
            cost_scale: 0.1,
            orientation_weight: 0.5,
            horizon: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return bad("success thresholds must be positive".into());
        }
        if !(self.cost_scale >= 0.0) || !(self.orientation_weight >= 0.0) {
            return bad("cost weights must be non-negative".into());
        }
        for (i, w) in self.workspaces.iter().enumerate() {
            if (0..3).any(|k| !(w.min[k] <= w.max[k]) || !w.min[k].is_finite() || !w.max[k].is_finite()) {
                return bad(format!("workspace {} has min above max", i + 1));
            }
            // the keep-out sphere sits around the initial base centroid (origin)
            let r = self.sim.limits.keep_out_radius;
            let farthest = Vector3::from_fn(|k, _| w.min[k].abs().max(w.max[k].abs()));
            if farthest.norm() < r {
                return bad(format!("workspace {} lies inside the keep-out region", i + 1));
            }
        }
        Ok(())
    }
}

/// Goal position for each end-effector (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalPair(pub [Vector3<f64>; 2]);

impl GoalPair {
    pub fn flat(&self) -> [f64; 6] {
        let [a, b] = self.0;
        [a.x, a.y, a.z, b.x, b.y, b.z]
    }
}

/// `[Θ₁, Θ̇₁, Θ₂, Θ̇₂, p_e1, p_e2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    dofs: [usize; 2],
}

impl Observation {
    pub fn from_state(state: &SystemState) -> Self {
        let dofs = [state.joint_angles[0].len(), state.joint_angles[1].len()];
        let mut values = Vec::with_capacity(2 * (dofs[0] + dofs[1]) + 6);
        for a in 0..2 {
            values.extend(&state.joint_angles[a]);
            values.extend(&state.joint_velocities[a]);
        }
        for p in &state.ee_positions {
            values.extend(p.iter());
        }
        Self { values, dofs }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn arm_offset(&self, arm: usize) -> usize {
        if arm == 0 {
            0
        } else {
            2 * self.dofs[0]
        }
    }

    pub fn joint_angles(&self, arm: usize) -> &[f64] {
        let o = self.arm_offset(arm);
        &self.values[o..o + self.dofs[arm]]
    }

    pub fn joint_rates(&self, arm: usize) -> &[f64] {
        let o = self.arm_offset(arm) + self.dofs[arm];
        &self.values[o..o + self.dofs[arm]]
    }

    pub fn ee(&self, arm: usize) -> Vector3<f64> {
        let o = 2 * (self.dofs[0] + self.dofs[1]) + 3 * arm;
        Vector3::new(self.values[o], self.values[o + 1], self.values[o + 2])
    }

    pub fn dofs(&self) -> [usize; 2] {
        self.dofs
    }
}

pub fn ee_errors(ee: [Vector3<f64>; 2], goals: &GoalPair) -> [f64; 2] {
    [(ee[0] - goals.0[0]).norm(), (ee[1] - goals.0[1]).norm()]
}

/// Sparse reward from achieved end-effector positions only.
pub fn reward(ee: [Vector3<f64>; 2], goals: &GoalPair, thresholds: [f64; 2]) -> f64 {
    let e = ee_errors(ee, goals);
    if e[0] <= thresholds[0] && e[1] <= thresholds[1] {
        0.0
    } else {
        -1.0
    }
}

/// `ϰ · (‖Δp‖ + w·∠(q q₀⁻¹)) · t`.
pub fn cost(
    position: &Vector3<f64>,
    orientation: &UnitQuaternion<f64>,
    initial_position: &Vector3<f64>,
    initial_orientation: &UnitQuaternion<f64>,
    t: usize,
    cost_scale: f64,
    orientation_weight: f64,
) -> f64 {
    let dp = (position - initial_position).norm();
    let dq = orientation.angle_to(initial_orientation);
    cost_scale * (dp + orientation_weight * dq) * t as f64
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub cost: f64,
    pub collision: bool,
    pub success: bool,
    pub errors: [f64; 2],
}

/// One row of an episode trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub reward: f64,
    pub cost: f64,
    pub e1: f64,
    pub e2: f64,
}

pub struct Env {
    config: EnvConfig,
    sim: Simulator,
    goals: GoalPair,
    t: usize,
    initial_position: Vector3<f64>,
    initial_orientation: UnitQuaternion<f64>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let chain = config.chain.build()?;
        Self::with_chain(config, chain)
    }

    /// Uses an explicit chain instead of `config.chain`, e.g. with a scaled base mass.
    pub fn with_chain(config: EnvConfig, chain: crate::dynamics::KinematicChain) -> Result<Self> {
        config.validate()?;
        let sim = Simulator::new(chain, config.sim.clone(), config.home.clone())?;
        let s = sim.state().clone();
        Ok(Self {
            goals: GoalPair(s.ee_positions),
            initial_position: s.base_position,
            initial_orientation: s.base_orientation,
            config,
            sim,
            t: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn state(&self) -> &SystemState {
        self.sim.state()
    }

    pub fn goals(&self) -> &GoalPair {
        &self.goals
    }

    /// Replaces the goals mid-episode (moving targets).
    pub fn set_goals(&mut self, goals: GoalPair) {
        self.goals = goals;
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn action_dim(&self) -> usize {
        self.sim.action_dim()
    }

    pub fn observation_dim(&self) -> usize {
        2 * self.sim.action_dim() + 6
    }

    pub fn observation(&self) -> Observation {
        Observation::from_state(self.sim.state())
    }

    /// Samples goals in each workspace, rejecting any inside the keep-out sphere.
    pub fn sample_goals(&self, rng: &mut impl Rng) -> GoalPair {
        let r = self.config.sim.limits.keep_out_radius;
        let centre = self.sim.state().base_position;
        let mut g = [Vector3::zeros(); 2];
        for (i, w) in self.config.workspaces.iter().enumerate() {
            g[i] = loop {
                let p = w.sample(rng);
                if (p - centre).norm() >= r {
                    break p;
                }
            };
        }
        GoalPair(g)
    }

    pub fn reset(&mut self, seed: u64) -> (Observation, GoalPair) {
        self.sim.reset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goals = self.sample_goals(&mut rng);
        self.begin(goals)
    }

    pub fn reset_with_goals(&mut self, seed: u64, goals: GoalPair) -> (Observation, GoalPair) {
        self.sim.reset(seed);
        self.begin(goals)
    }

    /// Starts from an arbitrary state instead of home (randomized initial poses).
    pub fn reset_to_state(&mut self, seed: u64, state: SystemState, goals: GoalPair) -> Result<(Observation, GoalPair)> {
        self.sim.reset(seed);
        self.sim.set_state(state)?;
        Ok(self.begin(goals))
    }

    fn begin(&mut self, goals: GoalPair) -> (Observation, GoalPair) {
        self.t = 0;
        self.goals = goals;
        let s = self.sim.state();
        self.initial_position = s.base_position;
        self.initial_orientation = s.base_orientation;
        (self.observation(), goals)
    }

    pub fn reward(&self, ee: [Vector3<f64>; 2], goals: &GoalPair) -> f64 {
        reward(ee, goals, self.config.thresholds)
    }

    pub fn cost_of(&self, state: &SystemState, t: usize) -> f64 {
        cost(
            &state.base_position,
            &state.base_orientation,
            &self.initial_position,
            &self.initial_orientation,
            t,
            self.config.cost_scale,
            self.config.orientation_weight,
        )
    }

    /// Applies joint-rate commands (rad/s) for one control step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.t >= self.config.horizon {
            return Err(EnvError::Exhausted(self.config.horizon));
        }
        if action.len() != self.action_dim() {
            return Err(EnvError::ActionDimension {
                expected: self.action_dim(),
                found: action.len(),
            });
        }
        let outcome = self.sim.step(action)?;
        let s = self.sim.state();
        let errors = ee_errors(s.ee_positions, &self.goals);
        let reward = self.reward(s.ee_positions, &self.goals);
        let cost = self.cost_of(s, self.t);
        self.t += 1;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            cost,
            collision: outcome.collision,
            success: reward == 0.0,
            errors,
        })
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.horizon
    }
}

pub fn write_episode_trace(path: impl AsRef<Path>, rows: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_thresholds_are_inclusive() {
        let g = GoalPair([Vector3::zeros(), Vector3::zeros()]);
        let th = [0.05, 0.05];
        assert_eq!(reward([Vector3::new(0.03, 0.0, 0.0), Vector3::new(0.0, 0.04, 0.0)], &g, th), 0.0);
        assert_eq!(reward([Vector3::new(0.06, 0.0, 0.0), Vector3::new(0.01, 0.0, 0.0)], &g, th), -1.0);
        assert_eq!(reward([Vector3::new(0.05, 0.0, 0.0), Vector3::zeros()], &g, th), 0.0);
    }

    #[test]
    fn cost_arithmetic() {
        let q = UnitQuaternion::identity();
        let z = Vector3::zeros();
        assert_eq!(cost(&Vector3::new(0.1, 0.0, 0.0), &q, &z, &q, 10, 1.0, 0.5), 1.0);
        assert_eq!(cost(&Vector3::new(0.1, 0.0, 0.0), &q, &z, &q, 0, 1.0, 0.5), 0.0);
        assert_eq!(cost(&z, &q, &z, &q, 37, 1.0, 0.5), 0.0);
        let turned = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.2);
        assert!((cost(&z, &turned, &z, &q, 2, 1.0, 0.5) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn observation_layout() {
        let mut env = Env::new(EnvConfig::planar()).unwrap();
        let (obs, _) = env.reset(1);
        assert_eq!(obs.len(), env.observation_dim());
        let s = env.state().clone();
        assert_eq!(obs.joint_angles(1), &s.joint_angles[1][..]);
        assert_eq!(obs.joint_rates(0), &s.joint_velocities[0][..]);
        assert_eq!(obs.ee(1), s.ee_positions[1]);
        let full = Env::new(EnvConfig::dual_ur5()).unwrap();
        assert_eq!(full.observation_dim(), 30);
    }

    #[test]
    fn episode_is_fixed_length() {
        let mut env = Env::new(EnvConfig::planar()).unwrap();
        env.reset(3);
        for _ in 0..60 {
            env.step(&[0.1, 0.0, 0.0, 0.1]).unwrap();
        }
        assert!(env.done());
        assert!(matches!(env.step(&[0.0; 4]), Err(EnvError::Exhausted(60))));
    }

    #[test]
    fn invalid_workspace_is_rejected() {
        let mut c = EnvConfig::planar();
        c.workspaces[0].min[0] = 2.0;
        assert!(Env::new(c).is_err());
        let mut c = EnvConfig::planar();
        c.workspaces[1] = Workspace {
            min: [0.0, 0.0, 0.0],
            max: [0.1, 0.1, 0.0],
        };
        assert!(Env::new(c).is_err());
    }
}
