use nalgebra::{Isometry3, UnitQuaternion, Vector3, Vector6};

use super::{base_pose, forward_kinematics, KinematicChain};

/// Full mechanical state. Base twist is `[linear; angular]` at the base
/// origin, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [Vec<f64>; 2],
    pub joint_velocities: [Vec<f64>; 2],
    pub ee_positions: [Vector3<f64>; 2],
    pub time: f64,
}

impl SystemState {
    /// Base at the origin, everything at rest.
    pub fn at_rest(chain: &KinematicChain, joint_angles: [Vec<f64>; 2]) -> Self {
        let mut s = Self {
            base_position: Vector3::zeros(),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_velocities: [vec![0.0; chain.dof(0)], vec![0.0; chain.dof(1)]],
            joint_angles,
            ee_positions: [Vector3::zeros(); 2],
            time: 0.0,
        };
        s.refresh_end_effectors(chain);
        s
    }

    pub fn base_pose(&self) -> Isometry3<f64> {
        base_pose(&self.base_position, &self.base_orientation)
    }

    pub fn base_twist(&self) -> Vector6<f64> {
        let mut t = Vector6::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&self.base_linear_velocity);
        t.fixed_rows_mut::<3>(3).copy_from(&self.base_angular_velocity);
        t
    }

    pub fn set_base_twist(&mut self, twist: &Vector6<f64>) {
        self.base_linear_velocity = twist.fixed_rows::<3>(0).into_owned();
        self.base_angular_velocity = twist.fixed_rows::<3>(3).into_owned();
    }

    /// Joint rates of both arms, arm 1 first.
    pub fn stacked_rates(&self) -> Vec<f64> {
        self.joint_velocities.concat()
    }

    pub fn stacked_angles(&self) -> Vec<f64> {
        self.joint_angles.concat()
    }

    pub fn refresh_end_effectors(&mut self, chain: &KinematicChain) {
        let ee = forward_kinematics(chain, &self.base_pose(), &self.joint_angles[0], &self.joint_angles[1])
            .expect("state angles are finite and sized to the chain");
        self.ee_positions = [ee[0].translation.vector, ee[1].translation.vector];
    }

    pub fn is_finite(&self) -> bool {
        self.base_position.iter().all(|v| v.is_finite())
            && self.base_orientation.coords.iter().all(|v| v.is_finite())
            && self.base_linear_velocity.iter().all(|v| v.is_finite())
            && self.base_angular_velocity.iter().all(|v| v.is_finite())
            && self.joint_angles.iter().flatten().all(|v| v.is_finite())
            && self.joint_velocities.iter().flatten().all(|v| v.is_finite())
    }
}
