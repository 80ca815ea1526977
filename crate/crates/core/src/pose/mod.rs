//! Relative rotation of an observed object between two point-cloud frames.
//!
//! Kabsch gives the closed form when correspondences are known; a point
//! encoder trained on the geodesic loss handles unordered clouds. Axis,
//! angle and spin rate follow from the estimated rotation.

mod cloud;
mod encoder;
mod register;
mod rotation;

pub use cloud::{make_rotation_pair, sample_surface, sample_surface_with, PointCloud, Shape};
pub use encoder::{
    canonicalize, evaluate_encoder, geodesic_loss_gradient, gram_schmidt, gram_schmidt_backward, train_encoder,
    training_pair, EncoderConfig, EncoderGradients, EncoderNet,
};
pub use register::{icp_refine, kabsch_estimate, kabsch_points};
pub use rotation::{
    angular_rate, axis_angle_from_rotation, bounded_rotation, check_rotation, geodesic_loss, nearest_rotation,
    rodrigues, rotation_angle, uniform_rotation, RotationEstimate, RotationMatrix, ROTATION_TOLERANCE,
};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("not a rotation: {0}")]
    NotARotation(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("every frame is degenerate")]
    AllDegenerate,
    #[error("encoder training diverged: {0}")]
    Divergence(String),
    #[error("bad encoder checkpoint: {0}")]
    Checkpoint(String),
    #[error("point cloud parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PoseError>;
