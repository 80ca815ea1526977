//! End-to-end scenarios: tracking spinning targets, policy evaluation,
//! convergence-time bounds and report tables.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{rollout, AgentConfig, AgentError, CherAgent, CherNetworks};
use crate::dynamics::{compute_coupling_inertia, compute_jacobians, generalized_jacobians, DynamicsError, SystemState};
use crate::env::{ee_errors, Env, EnvConfig, EnvError, GoalPair};
use crate::pose::{
    angular_rate, axis_angle_from_rotation, kabsch_estimate, rodrigues, sample_surface, EncoderNet, PointCloud, PoseError,
    RotationEstimate, Shape,
};
use crate::predictor::{build_plane_frame, predict_target, Ekf, EkfConfig, PlaneFrame, PredictorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("initial gap {0} is negative")]
    NegativeGap(f64),
    #[error("no episodes to report")]
    EmptyReport,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Smallest `T_B ≥ times[0]` with `d_e ≤ ∫ (ṗ_e − v) dτ`, integrating the
/// piecewise-linear integrand exactly. `∞` when the integral never gets there.
pub fn theorem1_bound(times: &[f64], ee_speed: &[f64], target_speed: &[f64], d_e: f64) -> Result<f64> {
    if d_e < 0.0 {
        return Err(HarnessError::NegativeGap(d_e));
    }
    if times.is_empty() || times.len() != ee_speed.len() || times.len() != target_speed.len() {
        return Err(HarnessError::InvalidConfig("speed profiles must share a non-empty time grid".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(HarnessError::InvalidConfig("time grid must be strictly increasing".into()));
    }
    if d_e == 0.0 {
        return Ok(times[0]);
    }
    let mut acc = 0.0;
    let first = ee_speed[0] - target_speed[0];
    let mut constant = true;
    for k in 0..times.len() - 1 {
        let h = times[k + 1] - times[k];
        let g0 = ee_speed[k] - target_speed[k];
        let g1 = ee_speed[k + 1] - target_speed[k + 1];
        constant &= g1 == first;
        let area = 0.5 * (g0 + g1) * h;
        if acc + area >= d_e {
            if constant {
                return Ok(times[0] + d_e / first);
            }
            let need = d_e - acc;
            // ∫₀^τ g0 + s·τ' dτ' = g0 τ + s τ²/2 with s the slope
            let s = (g1 - g0) / h;
            let tau = if s.abs() < 1e-300 {
                need / g0
            } else {
                let disc = (g0 * g0 + 2.0 * s * need).max(0.0);
                let root = if g0 >= 0.0 {
                    2.0 * need / (g0 + disc.sqrt())
                } else {
                    (-g0 + disc.sqrt()) / s
                };
                root.clamp(0.0, h)
            };
            return Ok(times[k] + tau);
        }
        acc += area;
    }
    Ok(f64::INFINITY)
}

/// Outcome of checking the bound on one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub t_b: f64,
    /// `v_t ≤ ṗ_e` on every sample up to `T_B`.
    pub premise_holds: bool,
    pub error_at_t_b: f64,
    pub bound: f64,
}

impl Theorem1Check {
    /// `Some(holds)` when the bound is finite and the premise holds.
    pub fn verdict(&self) -> Option<bool> {
        (self.t_b.is_finite() && self.premise_holds).then_some(self.error_at_t_b <= self.bound)
    }
}

/// Per-episode metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub success: bool,
    pub cost_value: f64,
    /// First step from which `e₁ + e₂` stays below the tracking bound.
    pub convergence_step: Option<usize>,
    /// Tightest per-arm `T_B` (s).
    pub t_b: f64,
    pub divergence: bool,
    /// Empirical prediction-error bound `ε`.
    pub epsilon: f64,
    pub theorem1: [Theorem1Check; 2],
}

impl EpisodeMetrics {
    pub fn error_sum(&self) -> Vec<f64> {
        self.e1.iter().zip(&self.e2).map(|(a, b)| a + b).collect()
    }
}

/// Least-squares slope of `y` against its index.
pub fn trend_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Positive trend over the final third.
pub fn divergence_flag(error_sum: &[f64]) -> bool {
    let start = error_sum.len() - error_sum.len() / 3;
    trend_slope(&error_sum[start..]) > 0.0
}

/// First index from which every value stays at or below `bound`.
pub fn convergence_step(error_sum: &[f64], bound: f64) -> Option<usize> {
    let last_bad = error_sum.iter().rposition(|e| *e > bound);
    match last_bad {
        None => Some(0),
        Some(i) if i + 1 < error_sum.len() => Some(i + 1),
        Some(_) => None,
    }
}

/// 95th percentile (nearest rank).
pub fn percentile95(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Where the relative rotation between point-cloud frames comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationSource {
    Kabsch,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Spin speed ω (rad/s).
    pub omega: f64,
    /// Distance of both target points from the spin axis (m).
    pub radius: f64,
    pub axis: [f64; 3],
    /// A point on the spin axis (m).
    pub center: [f64; 3],
    pub shape: Shape,
    pub cloud_points: usize,
    /// Point-cloud noise in normalized shape units.
    pub cloud_noise: f64,
    /// Target-measurement noise per axis (m).
    pub measurement_sigma: f64,
    /// Control steps between pose estimates.
    pub frame_interval: usize,
    pub steps: usize,
    /// Steps before `ε` stops being sampled.
    pub burn_in: usize,
    /// Largest end-effector speed (m/s) the commands may produce.
    pub ee_speed_cap: Option<f64>,
    /// Estimated rotations below this angle count as no rotation (rad).
    pub min_rotation_angle: f64,
    pub rotation_source: RotationSource,
    pub ekf: EkfConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            radius: 0.15,
            axis: [0.0, 0.0, 1.0],
            center: [1.05, 0.0, 0.0],
            shape: Shape::default_box(),
            cloud_points: 128,
            cloud_noise: 0.01,
            measurement_sigma: 0.005,
            frame_interval: 10,
            steps: 200,
            burn_in: 30,
            ee_speed_cap: None,
            min_rotation_angle: 0.02,
            rotation_source: RotationSource::Kabsch,
            ekf: EkfConfig::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad("omega must be finite and non-negative");
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(Vector3::from(self.axis).norm() > 1e-9) {
            return bad("axis must be non-zero");
        }
        if self.frame_interval == 0 || self.steps <= self.frame_interval + 2 {
            return bad("steps must exceed the frame interval by at least 3");
        }
        if self.burn_in < self.frame_interval || self.burn_in >= self.steps {
            return bad("burn_in must lie between the frame interval and the episode length");
        }
        if !(self.measurement_sigma >= 0.0) || !(self.cloud_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if let Some(c) = self.ee_speed_cap {
            if !(c > 0.0) {
                return bad("ee_speed_cap must be positive");
            }
        }
        if self.cloud_points < 4 {
            return bad("cloud_points must be at least 4");
        }
        self.shape.validate()?;
        Ok(())
    }

    fn unit_axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis).normalize()
    }

    /// True target positions at time `t` (s). The two points sit on
    /// opposite sides of the axis.
    pub fn targets(&self, t: f64) -> [Vector3<f64>; 2] {
        let n = self.unit_axis();
        let (u, _) = crate::predictor::plane_basis(&n).expect("validated axis");
        let r = rodrigues(&n, self.omega * t);
        let c = Vector3::from(self.center);
        let o = r * (u * self.radius);
        [c + o, c - o]
    }
}

/// One control step of a tracking run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingTraceRow {
    pub step: usize,
    pub t: f64,
    pub e1: f64,
    pub e2: f64,
    pub e_sum: f64,
    pub target1_x: f64,
    pub target1_y: f64,
    pub target1_z: f64,
    pub goal1_x: f64,
    pub goal1_y: f64,
    pub goal1_z: f64,
    pub target2_x: f64,
    pub target2_y: f64,
    pub target2_z: f64,
    pub goal2_x: f64,
    pub goal2_y: f64,
    pub goal2_z: f64,
    pub pred_err1: f64,
    pub pred_err2: f64,
    pub rate_estimate: f64,
    pub ee_speed1: f64,
    pub ee_speed2: f64,
    pub target_speed: f64,
}

#[derive(Debug, Clone)]
pub struct TrackingOutcome {
    pub metrics: EpisodeMetrics,
    pub trace: Vec<TrackingTraceRow>,
    pub filter_traces: [Vec<crate::predictor::FilterTraceRow>; 2],
    pub rate_estimate: f64,
}

pub fn write_tracking_trace(path: impl AsRef<Path>, rows: &[TrackingTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Scales joint-rate commands so neither end-effector exceeds `cap`
/// (m/s) given the free-floating base reaction.
pub fn cap_ee_speed(env: &Env, command: &[f64], cap: f64) -> Result<Vec<f64>> {
    let chain = env.simulator().chain();
    let state = env.state();
    let mats = compute_coupling_inertia(chain, state);
    let jacs = compute_jacobians(chain, state);
    let g = generalized_jacobians(&mats, &jacs)?;
    let q = DVector::from_column_slice(command);
    let mut fastest: f64 = 0.0;
    for j in &g {
        let v = j.rows(0, 3) * &q;
        fastest = fastest.max(v.norm());
    }
    if fastest <= cap {
        return Ok(command.to_vec());
    }
    let k = cap / fastest;
    Ok(command.iter().map(|c| c * k).collect())
}

struct ArmFilter {
    frame: PlaneFrame,
    ekf: Ekf,
}

/// Runs the perception → prediction → planning loop against a spinning
/// object for `config.steps` control steps.
pub fn run_tracking_scenario(
    env_config: &EnvConfig,
    nets: &CherNetworks,
    config: &ScenarioConfig,
    encoder: Option<&EncoderNet>,
) -> Result<TrackingOutcome> {
    config.validate()?;
    if config.rotation_source == RotationSource::Encoder && encoder.is_none() {
        return Err(HarnessError::InvalidConfig("rotation_source = encoder needs an encoder checkpoint".into()));
    }
    let mut env_config = env_config.clone();
    env_config.horizon = config.steps;
    let mut env = Env::new(env_config)?;
    let dt = env.config().sim.dt;
    let thresholds = env.config().thresholds;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.measurement_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let measure = |p: Vector3<f64>, rng: &mut ChaCha8Rng| -> Vector3<f64> {
        if config.measurement_sigma > 0.0 {
            p + Vector3::from_fn(|_, _| noise.sample(rng))
        } else {
            p
        }
    };
    let base_cloud = sample_surface(&config.shape, config.cloud_points, 0.0, rng.gen())?;
    let n_true = config.unit_axis();
    let snapshot = |t: f64, rng: &mut ChaCha8Rng| -> PointCloud {
        base_cloud
            .rotated(&rodrigues(&n_true, config.omega * t))
            .with_noise(config.cloud_noise, rng)
    };

    let initial_targets = config.targets(0.0);
    let mut obs = env.reset_with_goals(config.seed, GoalPair(initial_targets)).0;

    let mut measurements: [Vec<Vector3<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut filters: Option<[ArmFilter; 2]> = None;
    let mut estimates: Vec<RotationEstimate> = Vec::new();
    let mut last_cloud = snapshot(0.0, &mut rng);
    let mut rate = 0.0;
    let mut axis = Vector3::z();
    let mut burn_in_errors = Vec::new();
    let mut trace = Vec::with_capacity(config.steps);
    let mut filter_traces: [Vec<crate::predictor::FilterTraceRow>; 2] = [Vec::new(), Vec::new()];
    let mut e = [Vec::with_capacity(config.steps), Vec::with_capacity(config.steps)];
    let mut ee_speed = [vec![0.0], vec![0.0]];
    let mut target_speed = vec![config.omega * config.radius];
    let mut times = vec![0.0];
    let init_errors = ee_errors(env.state().ee_positions, &GoalPair(initial_targets));
    let mut cost_value = 0.0;
    let mut discount = 1.0;
    let gamma_c = AgentConfig::default().gamma_c;

    for step in 0..config.steps {
        let t = step as f64 * dt;
        let truth = config.targets(t);
        let z = [measure(truth[0], &mut rng), measure(truth[1], &mut rng)];
        measurements[0].push(z[0]);
        measurements[1].push(z[1]);

        if step > 0 && step % config.frame_interval == 0 {
            let cloud = snapshot(t, &mut rng);
            let r = match (config.rotation_source, encoder) {
                (RotationSource::Encoder, Some(net)) => net.estimate(&last_cloud, &cloud)?.0,
                _ => kabsch_estimate(&last_cloud, &cloud)?,
            };
            let mut est = axis_angle_from_rotation(r.matrix())?;
            if est.angle < config.min_rotation_angle {
                est.degenerate = true;
            }
            estimates.push(est.with_interval(config.frame_interval as f64 * dt));
            last_cloud = cloud;
            match angular_rate(&estimates, config.frame_interval as f64 * dt) {
                Ok((w, a)) => {
                    rate = w;
                    axis = a;
                }
                Err(PoseError::AllDegenerate) => rate = 0.0,
                Err(other) => return Err(other.into()),
            }
            if let Some(f) = filters.as_mut() {
                f[0].ekf.rate = rate;
                f[1].ekf.rate = rate;
            }
        }

        if filters.is_none() && step == config.frame_interval {
            let k = config.frame_interval;
            let make = |i: usize| -> Result<ArmFilter> {
                let window = &measurements[i];
                let frame = match build_plane_frame(&axis, window) {
                    Ok(f) if f.radius.is_finite() && f.radius < 1.0 => f,
                    _ => {
                        let mean = window.iter().sum::<Vector3<f64>>() / window.len() as f64;
                        PlaneFrame::with_center(&axis, &mean, 0.0)?
                    }
                };
                let a = frame.project(&window[step - k]);
                let b = frame.project(&window[step]);
                let d = b - a;
                let span = k as f64 * dt;
                // chord direction is the tangent half-way along the arc
                let heading = d.y.atan2(d.x) + rate * (span / 2.0 + dt / 2.0);
                let x = nalgebra::Vector4::new(b.x, b.y, crate::dynamics::wrap_angle(heading), frame.radius * rate);
                let ekf = Ekf::new(x, &config.ekf, dt, rate)?;
                Ok(ArmFilter { frame, ekf })
            };
            filters = Some([make(0)?, make(1)?]);
        } else if let Some(f) = filters.as_mut() {
            for i in 0..2 {
                f[i].ekf.predict();
                let zp = f[i].frame.project(&z[i]);
                f[i].ekf.update(&zp)?;
            }
        }

        let goals = match &filters {
            Some(f) => [predict_target(&f[0].ekf, &f[0].frame), predict_target(&f[1].ekf, &f[1].frame)],
            None => z,
        };
        let next_truth = config.targets(t + dt);
        let pred_err = [(goals[0] - next_truth[0]).norm(), (goals[1] - next_truth[1]).norm()];
        if let Some(f) = &filters {
            if step < config.burn_in {
                burn_in_errors.extend_from_slice(&pred_err);
            }
            for i in 0..2 {
                let zp = f[i].frame.project(&z[i]);
                filter_traces[i].push(crate::predictor::FilterTraceRow {
                    t,
                    x: f[i].ekf.x[0],
                    y: f[i].ekf.x[1],
                    varsigma: f[i].ekf.x[2],
                    v: f[i].ekf.x[3],
                    meas_x: zp.x,
                    meas_y: zp.y,
                    pred_err: pred_err[i],
                });
            }
        }

        let goal_pair = GoalPair(goals);
        env.set_goals(goal_pair);
        let action = nets.deterministic_action(&obs, &goal_pair)?;
        let mut command = nets.to_command(&action);
        if let Some(cap) = config.ee_speed_cap {
            command = cap_ee_speed(&env, &command, cap)?;
        }
        let before = env.state().ee_positions;
        let result = env.step(&command)?;
        cost_value += discount * result.cost;
        discount *= gamma_c;
        obs = result.observation;
        let after = env.state().ee_positions;
        let errs = ee_errors(after, &GoalPair(next_truth));
        e[0].push(errs[0]);
        e[1].push(errs[1]);
        let speeds = [(after[0] - before[0]).norm() / dt, (after[1] - before[1]).norm() / dt];
        ee_speed[0].push(speeds[0]);
        ee_speed[1].push(speeds[1]);
        target_speed.push(config.omega * config.radius);
        times.push(t + dt);
        trace.push(TrackingTraceRow {
            step,
            t: t + dt,
            e1: errs[0],
            e2: errs[1],
            e_sum: errs[0] + errs[1],
            target1_x: next_truth[0].x,
            target1_y: next_truth[0].y,
            target1_z: next_truth[0].z,
            goal1_x: goals[0].x,
            goal1_y: goals[0].y,
            goal1_z: goals[0].z,
            target2_x: next_truth[1].x,
            target2_y: next_truth[1].y,
            target2_z: next_truth[1].z,
            goal2_x: goals[1].x,
            goal2_y: goals[1].y,
            goal2_z: goals[1].z,
            pred_err1: pred_err[0],
            pred_err2: pred_err[1],
            rate_estimate: rate,
            ee_speed1: speeds[0],
            ee_speed2: speeds[1],
            target_speed: config.omega * config.radius,
        });
    }

    let epsilon = percentile95(&burn_in_errors);
    let sum: Vec<f64> = e[0].iter().zip(&e[1]).map(|(a, b)| a + b).collect();
    let bound = thresholds[0] + thresholds[1] + 2.0 * epsilon;
    let mut checks = [Theorem1Check {
        t_b: f64::INFINITY,
        premise_holds: false,
        error_at_t_b: f64::NAN,
        bound: 0.0,
    }; 2];
    for i in 0..2 {
        let t_b = theorem1_bound(&times, &ee_speed[i], &target_speed, init_errors[i])?;
        let k_b = if t_b.is_finite() {
            ((t_b / dt).ceil() as usize).min(times.len() - 1)
        } else {
            times.len() - 1
        };
        let premise = (1..=k_b).all(|k| target_speed[k] <= ee_speed[i][k]);
        checks[i] = Theorem1Check {
            t_b,
            premise_holds: premise,
            error_at_t_b: if k_b == 0 { init_errors[i] } else { e[i][k_b - 1] },
            bound: thresholds[i] + epsilon,
        };
    }
    let final_e = [*e[0].last().unwrap(), *e[1].last().unwrap()];
    let metrics = EpisodeMetrics {
        success: final_e[0] <= thresholds[0] && final_e[1] <= thresholds[1],
        cost_value,
        convergence_step: convergence_step(&sum, bound),
        t_b: checks[0].t_b.min(checks[1].t_b),
        divergence: divergence_flag(&sum),
        epsilon,
        theorem1: checks,
        e1: std::mem::take(&mut e[0]),
        e2: std::mem::take(&mut e[1]),
    };
    Ok(TrackingOutcome {
        metrics,
        trace,
        filter_traces,
        rate_estimate: rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seeds_offset: u64,
    /// Start each episode from random joint angles around home.
    pub randomize_initial: bool,
    /// Half-width of the random joint perturbation (rad).
    pub initial_spread: f64,
    pub base_mass_scales: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seeds_offset: 10_000,
            randomize_initial: false,
            initial_spread: 0.3,
            base_mass_scales: vec![1.0],
        }
    }
}

/// Mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Aggregate over one evaluation setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub base_mass_scale: f64,
    pub episodes: usize,
    pub success_rate: f64,
    pub e1: Stat,
    pub e2: Stat,
    pub cost_value: Stat,
}

/// Greedy evaluation with random goals, one report per base-mass scale.
pub fn evaluate_policy(
    env_config: &EnvConfig,
    nets: &CherNetworks,
    n_episodes: usize,
    options: &EvalOptions,
) -> Result<Vec<PolicyReport>> {
    if n_episodes == 0 || options.base_mass_scales.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let agent = CherAgent::new(nets.clone(), AgentConfig::default())?;
    let base_chain = env_config.chain.build()?;
    let mut reports = Vec::with_capacity(options.base_mass_scales.len());
    for &scale in &options.base_mass_scales {
        let chain = base_chain.with_base_mass_scale(scale);
        let mut env = Env::with_chain(env_config.clone(), chain.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seeds_offset);
        let (mut e1, mut e2, mut cost, mut wins) = (Vec::new(), Vec::new(), Vec::new(), 0usize);
        for k in 0..n_episodes {
            let seed = options.seeds_offset + k as u64;
            let out = if options.randomize_initial {
                let mut goal_rng = ChaCha8Rng::seed_from_u64(seed);
                let goals = env.sample_goals(&mut goal_rng);
                let state = random_start(&env, &chain, options.initial_spread, &mut goal_rng);
                let mut obs = env.reset_to_state(seed, state, goals)?.0;
                run_greedy(&mut env, &agent, &mut obs, goals, agent.config.gamma_c)?
            } else {
                rollout(&mut env, &agent, seed, None, false, &mut rng)?
            };
            let f = out.final_errors();
            e1.push(f[0]);
            e2.push(f[1]);
            cost.push(out.cost_value);
            wins += out.success as usize;
        }
        reports.push(PolicyReport {
            base_mass_scale: scale,
            episodes: n_episodes,
            success_rate: wins as f64 / n_episodes as f64,
            e1: Stat::of(&e1),
            e2: Stat::of(&e2),
            cost_value: Stat::of(&cost),
        });
    }
    Ok(reports)
}

fn random_start(env: &Env, chain: &crate::dynamics::KinematicChain, spread: f64, rng: &mut impl Rng) -> SystemState {
    let home = &env.config().home;
    loop {
        let angles = [0, 1].map(|a| home[a].iter().map(|q| q + rng.gen_range(-spread..=spread)).collect::<Vec<_>>());
        let s = SystemState::at_rest(chain, angles);
        if !env.simulator().in_keep_out(&s) {
            return s;
        }
    }
}

fn run_greedy(
    env: &mut Env,
    agent: &CherAgent,
    obs: &mut crate::env::Observation,
    goals: GoalPair,
    gamma_c: f64,
) -> Result<crate::agent::EpisodeOutcome> {
    let mut out = crate::agent::EpisodeOutcome {
        transitions: Vec::new(),
        errors: Vec::new(),
        success: false,
        cost_value: 0.0,
        collisions: 0,
    };
    let mut discount = 1.0;
    while !env.done() {
        let a = agent.nets.deterministic_action(obs, &goals)?;
        let step = env.step(&agent.nets.to_command(&a))?;
        out.cost_value += discount * step.cost;
        discount *= gamma_c;
        out.errors.push(step.errors);
        out.collisions += step.collision as usize;
        out.success = step.success;
        *obs = step.observation;
    }
    Ok(out)
}

/// One evaluated run, as written by `eval` and read by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub lambda: f64,
    pub seed: u64,
    pub her: bool,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_e1: f64,
    pub mean_e2: f64,
    pub cost_value: f64,
}

pub fn write_run_summaries(path: impl AsRef<Path>, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_summaries(path: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Seeds of one `(mode, λ, her)` setting pooled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub mode: String,
    pub lambda: f64,
    pub her: bool,
    pub runs: usize,
    pub success_rate: Stat,
    pub e1: Stat,
    pub e2: Stat,
    pub cost_value: Stat,
}

pub fn group_summaries(rows: &[RunSummary]) -> Result<Vec<ReportGroup>> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut groups: BTreeMap<(String, u64, bool), Vec<&RunSummary>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.mode.clone(), r.lambda.to_bits(), r.her)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((mode, bits, her), rs)| {
            let col = |f: fn(&RunSummary) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            ReportGroup {
                mode,
                lambda: f64::from_bits(bits),
                her,
                runs: rs.len(),
                success_rate: col(|r| r.success_rate),
                e1: col(|r| r.mean_e1),
                e2: col(|r| r.mean_e2),
                cost_value: col(|r| r.cost_value),
            }
        })
        .collect())
}

/// Markdown table, one row per group.
pub fn render_table(groups: &[ReportGroup]) -> String {
    let mut s = String::from("| mode | lambda | her | runs | success | e1 (m) | e2 (m) | cost value |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for g in groups {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.3} ± {:.3} |\n",
            g.mode,
            g.lambda,
            if g.her { "yes" } else { "no" },
            g.runs,
            g.success_rate.mean,
            g.success_rate.std,
            g.e1.mean,
            g.e1.std,
            g.e2.mean,
            g.e2.std,
            g.cost_value.mean,
            g.cost_value.std
        ));
    }
    s
}

/// `(lower, higher)` penalty groups with HER, if both λ = 0.5 and λ = 0 exist.
pub fn penalty_cost_ordering(groups: &[ReportGroup]) -> Option<(f64, f64)> {
    let find = |l: f64| {
        groups
            .iter()
            .find(|g| g.mode == "penalty" && g.her && g.lambda == l)
            .map(|g| g.cost_value.mean)
    };
    Some((find(0.5)?, find(0.0)?))
}
