//! Free-floating dual-arm manipulator laboratory: momentum-consistent
//! simulation, a constrained goal-conditioned actor-critic with hindsight
//! relabeling, point-cloud rotation estimation and EKF target prediction.

pub mod dynamics;
pub mod nn;
pub mod env;
pub mod agent;
pub mod pose;
pub mod predictor;
pub mod harness;
