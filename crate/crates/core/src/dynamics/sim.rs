use std::f64::consts::PI;
use std::path::Path;

use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    base_velocity_from_momentum, compute_coupling_inertia, link_sample_points, state_frames, DynamicsError,
    KinematicChain, Result, SystemState,
};

/// Wraps to `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        PI
    } else {
        y
    }
}

/// Per-joint limits and the velocity-loop gains.
///
/// The joint rate follows the clamped command through a first-order lag
/// with time constant `kd / kp`. The rate error driving the lag is capped at
/// `max_torque / kp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuationLimits {
    pub max_angle: f64,
    pub max_rate: f64,
    pub max_torque: f64,
    pub kp: f64,
    pub kd: f64,
    /// Radius of the keep-out sphere around the base centroid (m).
    pub keep_out_radius: f64,
}

impl Default for ActuationLimits {
    fn default() -> Self {
        Self {
            max_angle: PI,
            max_rate: 1.0,
            max_torque: 100.0,
            kp: 50.0,
            kd: 1.0,
            keep_out_radius: 0.45,
        }
    }
}

impl ActuationLimits {
    pub fn time_constant(&self) -> f64 {
        self.kd / self.kp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub substeps: usize,
    pub limits: ActuationLimits,
    /// Std of zero-mean Gaussian noise on executed joint rates (rad/s).
    pub rate_noise: f64,
    pub samples_per_link: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            substeps: 4,
            limits: ActuationLimits::default(),
            rate_noise: 0.0,
            samples_per_link: 5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        let positive = [
            ("dt", self.dt),
            ("max_angle", l.max_angle),
            ("max_rate", l.max_rate),
            ("max_torque", l.max_torque),
            ("kp", l.kp),
            ("kd", l.kd),
            ("keep_out_radius", l.keep_out_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if l.max_angle > PI {
            return Err(DynamicsError::InvalidConfig("max_angle cannot exceed pi".into()));
        }
        if self.substeps == 0 || self.samples_per_link == 0 {
            return Err(DynamicsError::InvalidConfig("substeps and samples_per_link must be at least 1".into()));
        }
        if !(self.rate_noise >= 0.0 && self.rate_noise.is_finite()) {
            return Err(DynamicsError::InvalidConfig("rate_noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepOutcome {
    pub collision: bool,
}

/// Owns one system and advances it under joint-rate commands.
#[derive(Debug, Clone)]
pub struct Simulator {
    chain: KinematicChain,
    config: SimConfig,
    home: [Vec<f64>; 2],
    state: SystemState,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(chain: KinematicChain, config: SimConfig, home: [Vec<f64>; 2]) -> Result<Self> {
        chain.validate()?;
        config.validate()?;
        for (a, h) in home.iter().enumerate() {
            if h.len() != chain.dof(a) {
                return Err(DynamicsError::Dimension {
                    expected: chain.dof(a),
                    found: h.len(),
                });
            }
        }
        let state = SystemState::at_rest(&chain, home.clone());
        let sim = Self {
            chain,
            config,
            home,
            state,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        if sim.in_keep_out(&sim.state) {
            return Err(DynamicsError::InvalidConfig("home configuration intersects the keep-out region".into()));
        }
        Ok(sim)
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn action_dim(&self) -> usize {
        self.chain.total_dof()
    }

    /// Back to the home configuration at rest; `seed` drives the rate noise.
    pub fn reset(&mut self, seed: u64) -> &SystemState {
        self.state = SystemState::at_rest(&self.chain, self.home.clone());
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        &self.state
    }

    /// Replaces the state; the base twist is recomputed so total momentum is zero.
    pub fn set_state(&mut self, mut state: SystemState) -> Result<()> {
        let mats = compute_coupling_inertia(&self.chain, &state);
        let twist = base_velocity_from_momentum(&mats, &state.joint_velocities[0], &state.joint_velocities[1])?;
        state.set_base_twist(&twist);
        state.refresh_end_effectors(&self.chain);
        self.state = state;
        Ok(())
    }

    pub fn in_keep_out(&self, state: &SystemState) -> bool {
        let r2 = self.config.limits.keep_out_radius.powi(2);
        state_frames(&self.chain, state).iter().any(|f| {
            link_sample_points(f, self.config.samples_per_link)
                .iter()
                .any(|p| (p - state.base_position).norm_squared() < r2)
        })
    }

    /// One control step towards the commanded joint rates (arm 1 then arm 2).
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let n1 = self.chain.dof(0);
        if action.len() != self.action_dim() {
            return Err(DynamicsError::Dimension {
                expected: self.action_dim(),
                found: action.len(),
            });
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteInput("action".into()));
        }
        let lim = self.config.limits.clone();
        let desired: Vec<f64> = action.iter().map(|v| v.clamp(-lim.max_rate, lim.max_rate)).collect();
        let h = self.config.dt / self.config.substeps as f64;
        let alpha = 1.0 - (-h / lim.time_constant()).exp();
        let err_cap = lim.max_torque / lim.kp;
        let noise = (self.config.rate_noise > 0.0)
            .then(|| Normal::new(0.0, self.config.rate_noise).expect("validated noise std"));

        let start = self.state.clone();
        let mut s = self.state.clone();
        for _ in 0..self.config.substeps {
            for (i, &des) in desired.iter().enumerate() {
                let (a, j) = if i < n1 { (0, i) } else { (1, i - n1) };
                let qd = &mut s.joint_velocities[a][j];
                *qd += alpha * (des - *qd).clamp(-err_cap, err_cap);
                if let Some(n) = &noise {
                    *qd += n.sample(&mut self.rng);
                }
                *qd = qd.clamp(-lim.max_rate, lim.max_rate);
                let q = s.joint_angles[a][j];
                if lim.max_angle < PI && (q + h * *qd).abs() > lim.max_angle {
                    *qd = ((q + h * *qd).clamp(-lim.max_angle, lim.max_angle) - q) / h;
                }
            }
            let mats = compute_coupling_inertia(&self.chain, &s);
            let twist = base_velocity_from_momentum(&mats, &s.joint_velocities[0], &s.joint_velocities[1])?;
            s.base_position += twist.fixed_rows::<3>(0) * h;
            let w = twist.fixed_rows::<3>(3).into_owned();
            s.base_orientation = UnitQuaternion::new_normalize(
                (UnitQuaternion::from_scaled_axis(w * h) * s.base_orientation).into_inner(),
            );
            for a in 0..2 {
                for (q, qd) in s.joint_angles[a].iter_mut().zip(&s.joint_velocities[a]) {
                    *q = wrap_angle(*q + h * qd);
                }
            }
            let mats = compute_coupling_inertia(&self.chain, &s);
            let twist = base_velocity_from_momentum(&mats, &s.joint_velocities[0], &s.joint_velocities[1])?;
            s.set_base_twist(&twist);
            s.time += h;
            if !s.is_finite() {
                return Err(DynamicsError::Internal(format!("non-finite state at t = {}", s.time)));
            }
            if self.in_keep_out(&s) {
                let mut frozen = start;
                for v in frozen.joint_velocities.iter_mut().flatten() {
                    *v = 0.0;
                }
                frozen.base_linear_velocity.fill(0.0);
                frozen.base_angular_velocity.fill(0.0);
                frozen.time += self.config.dt;
                self.state = frozen;
                return Ok(StepOutcome { collision: true });
            }
        }
        s.time = start.time + self.config.dt;
        s.refresh_end_effectors(&self.chain);
        self.state = s;
        Ok(StepOutcome { collision: false })
    }
}

/// Writes `t, base_pos(3), base_quat(4), theta, theta_dot, p_e1(3), p_e2(3)`.
pub fn write_trace(path: impl AsRef<Path>, states: &[SystemState]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = states.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> = ["t", "base_x", "base_y", "base_z", "quat_w", "quat_x", "quat_y", "quat_z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (prefix, vals) in [("theta", &first.joint_angles), ("theta_dot", &first.joint_velocities)] {
        for (a, arm) in vals.iter().enumerate() {
            for j in 0..arm.len() {
                header.push(format!("{prefix}{}_{j}", a + 1));
            }
        }
    }
    for e in ["pe1", "pe2"] {
        for c in ["x", "y", "z"] {
            header.push(format!("{e}_{c}"));
        }
    }
    w.write_record(&header)?;
    for s in states {
        let q = s.base_orientation.quaternion();
        let mut row = vec![s.time, s.base_position.x, s.base_position.y, s.base_position.z, q.w, q.i, q.j, q.k];
        row.extend(s.joint_angles.iter().flatten());
        row.extend(s.joint_velocities.iter().flatten());
        for p in &s.ee_positions {
            row.extend(p.iter());
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
