//! Free-floating base carrying two serial arms.
//!
//! The base is not actuated: its twist follows from conservation of the
//! system's total momentum, `H_b ṙ_b + H_r¹ Θ̇₁ + H_r² Θ̇₂ = 0`. Joint
//! velocities track clamped commands through a first-order lag.

mod chain;
mod kinematics;
mod momentum;
mod sim;
mod state;

pub use chain::{ArmChain, BaseSpec, ChainConfig, KinematicChain, LinkSpec};
pub use kinematics::{
    arm_frames, base_pose, body_poses, compute_jacobians, forward_kinematics, link_sample_points, state_frames,
    ArmFrames, BodyPose, JacobianSet,
};
pub use momentum::{
    base_velocity_from_momentum, compute_coupling_inertia, generalized_jacobians, total_momentum, MomentumMatrices,
};
pub use sim::{wrap_angle, write_trace, ActuationLimits, SimConfig, Simulator, StepOutcome};
pub use state::SystemState;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} values, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("joint angle {0} is outside the wrapped domain")]
    AngleDomain(f64),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("internal integration failure: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;
