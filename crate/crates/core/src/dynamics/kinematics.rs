use nalgebra::{DMatrix, Isometry3, Matrix3, Matrix6, Translation3, UnitQuaternion, Vector3};

use super::{ArmChain, DynamicsError, KinematicChain, Result, SystemState};

/// World-frame geometry of one arm at a configuration.
#[derive(Debug, Clone)]
pub struct ArmFrames {
    /// Link frames (after each joint rotation).
    pub links: Vec<Isometry3<f64>>,
    /// Joint origins, world frame.
    pub joint_origins: Vec<Vector3<f64>>,
    /// Joint axes, world frame.
    pub joint_axes: Vec<Vector3<f64>>,
    pub ee: Isometry3<f64>,
}

/// Mass properties of one rigid body placed in the world.
#[derive(Debug, Clone, Copy)]
pub struct BodyPose {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Inertia about the COM, world frame.
    pub inertia: Matrix3<f64>,
}

/// End-effector twist maps: `ṙ_e = J_b ṙ_b + J_r Θ̇` per arm. Twists are
/// `[linear; angular]` in the world frame; the base twist is taken at the
/// base origin.
#[derive(Debug, Clone)]
pub struct JacobianSet {
    pub base: [Matrix6<f64>; 2],
    pub arm: [DMatrix<f64>; 2],
}

pub fn base_pose(position: &Vector3<f64>, orientation: &UnitQuaternion<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(*position), *orientation)
}

pub fn arm_frames(arm: &ArmChain, base: &Isometry3<f64>, angles: &[f64]) -> ArmFrames {
    let n = arm.dof();
    let mut links = Vec::with_capacity(n);
    let mut joint_origins = Vec::with_capacity(n);
    let mut joint_axes = Vec::with_capacity(n);
    let mut frame = base * arm.mount;
    for (link, &theta) in arm.links.iter().zip(angles) {
        let joint = frame * link.offset;
        joint_origins.push(joint.translation.vector);
        joint_axes.push(joint.rotation * link.axis.into_inner());
        frame = joint * UnitQuaternion::from_axis_angle(&link.axis, theta);
        links.push(frame);
    }
    let ee = frame * arm.tool;
    ArmFrames {
        links,
        joint_origins,
        joint_axes,
        ee,
    }
}

fn check_angles(chain: &KinematicChain, angles: [&[f64]; 2]) -> Result<()> {
    for (a, theta) in angles.iter().enumerate() {
        if theta.len() != chain.dof(a) {
            return Err(DynamicsError::Dimension {
                expected: chain.dof(a),
                found: theta.len(),
            });
        }
        if let Some(&bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(DynamicsError::AngleDomain(bad));
        }
    }
    Ok(())
}

/// End-effector poses of both arms in the inertial frame.
pub fn forward_kinematics(
    chain: &KinematicChain,
    base: &Isometry3<f64>,
    theta1: &[f64],
    theta2: &[f64],
) -> Result<[Isometry3<f64>; 2]> {
    check_angles(chain, [theta1, theta2])?;
    Ok([
        arm_frames(&chain.arms[0], base, theta1).ee,
        arm_frames(&chain.arms[1], base, theta2).ee,
    ])
}

pub fn state_frames(chain: &KinematicChain, state: &SystemState) -> [ArmFrames; 2] {
    let base = state.base_pose();
    [
        arm_frames(&chain.arms[0], &base, &state.joint_angles[0]),
        arm_frames(&chain.arms[1], &base, &state.joint_angles[1]),
    ]
}

/// Every rigid body of the system: the base first, then arm 1 links, then arm 2 links.
pub fn body_poses(chain: &KinematicChain, state: &SystemState) -> Vec<BodyPose> {
    let frames = state_frames(chain, state);
    let mut out = Vec::with_capacity(1 + chain.total_dof());
    let rb = state.base_orientation.to_rotation_matrix();
    out.push(BodyPose {
        mass: chain.base.mass,
        com: state.base_position,
        rotation: state.base_orientation,
        inertia: rb * chain.base.inertia * rb.transpose(),
    });
    for (arm, f) in chain.arms.iter().zip(&frames) {
        for (link, frame) in arm.links.iter().zip(&f.links) {
            let r = frame.rotation.to_rotation_matrix();
            out.push(BodyPose {
                mass: link.mass,
                com: frame.transform_point(&link.com.into()).coords,
                rotation: frame.rotation,
                inertia: r * link.inertia * r.transpose(),
            });
        }
    }
    out
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Geometric Jacobians of both end-effectors.
pub fn compute_jacobians(chain: &KinematicChain, state: &SystemState) -> JacobianSet {
    let frames = state_frames(chain, state);
    let rb = state.base_position;
    let make_base = |ee: &Vector3<f64>| {
        let mut j = Matrix6::identity();
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&(ee - rb))));
        j
    };
    let make_arm = |f: &ArmFrames| {
        let ee = f.ee.translation.vector;
        let n = f.joint_axes.len();
        let mut j = DMatrix::zeros(6, n);
        for k in 0..n {
            let z = f.joint_axes[k];
            let lin = z.cross(&(ee - f.joint_origins[k]));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, k).copy_from(&z);
        }
        j
    };
    JacobianSet {
        base: [
            make_base(&frames[0].ee.translation.vector),
            make_base(&frames[1].ee.translation.vector),
        ],
        arm: [make_arm(&frames[0]), make_arm(&frames[1])],
    }
}

/// Sample points along every arm link: `per_link` evenly spaced points on
/// the segment from the link's joint origin to the next joint (or tool).
pub fn link_sample_points(frames: &ArmFrames, per_link: usize) -> Vec<Vector3<f64>> {
    let n = frames.joint_origins.len();
    let mut out = Vec::with_capacity(n * per_link);
    for j in 0..n {
        let a = frames.joint_origins[j];
        let b = if j + 1 < n {
            frames.joint_origins[j + 1]
        } else {
            frames.ee.translation.vector
        };
        for k in 0..per_link {
            let s = if per_link == 1 { 0.5 } else { k as f64 / (per_link - 1) as f64 };
            out.push(a + (b - a) * s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ChainConfig;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_planar() -> KinematicChain {
        KinematicChain::planar(
            [1.0, 1.0],
            [1.0, 1.0],
            10.0,
            1.0,
            [Isometry3::identity(), Isometry3::identity()],
            false,
        )
    }

    #[test]
    fn planar_straight_configuration() {
        let c = unit_planar();
        let ee = forward_kinematics(&c, &Isometry3::identity(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((ee[0].translation.vector - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn planar_quarter_turn() {
        let c = unit_planar();
        let ee = forward_kinematics(&c, &Isometry3::identity(), &[FRAC_PI_2, 0.0], &[0.0, 0.0]).unwrap();
        assert!((ee[0].translation.vector - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn non_finite_angle_is_rejected() {
        let c = unit_planar();
        let err = forward_kinematics(&c, &Isometry3::identity(), &[f64::NAN, 0.0], &[0.0, 0.0]);
        assert!(matches!(err, Err(DynamicsError::AngleDomain(_))));
        let err = forward_kinematics(&c, &Isometry3::identity(), &[0.0], &[0.0, 0.0]);
        assert!(matches!(err, Err(DynamicsError::Dimension { .. })));
    }

    // Independent oracle: 4×4 homogeneous matrices composed with explicit
    // Rodrigues rotations.
    fn homogeneous(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = skew(axis);
        Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
    }

    fn iso_to_h(iso: &Isometry3<f64>) -> Matrix4<f64> {
        iso.to_homogeneous()
    }

    fn oracle_ee(arm: &ArmChain, base: Matrix4<f64>, angles: &[f64]) -> Vector3<f64> {
        let mut t = base * iso_to_h(&arm.mount);
        for (link, &q) in arm.links.iter().zip(angles) {
            t = t * iso_to_h(&link.offset) * homogeneous(rodrigues(&link.axis, q), Vector3::zeros());
        }
        t = t * iso_to_h(&arm.tool);
        Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
    }

    #[test]
    fn full_chain_matches_homogeneous_oracle() {
        let c = ChainConfig::default_dual_ur5().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t1: Vec<f64> = (0..6).map(|_| rng.gen_range(-PI..PI)).collect();
            let t2: Vec<f64> = (0..6).map(|_| rng.gen_range(-PI..PI)).collect();
            let axis = Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>()).normalize();
            let ang = rng.gen_range(-PI..PI);
            let pos = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let base = Isometry3::from_parts(
                Translation3::from(pos),
                UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), ang),
            );
            let base_h = homogeneous(rodrigues(&axis, ang), pos);
            let ee = forward_kinematics(&c, &base, &t1, &t2).unwrap();
            let o1 = oracle_ee(&c.arms[0], base_h, &t1);
            let o2 = oracle_ee(&c.arms[1], base_h, &t2);
            assert!((ee[0].translation.vector - o1).norm() < 1e-12);
            assert!((ee[1].translation.vector - o2).norm() < 1e-12);
        }
    }

    #[test]
    fn planar_jacobian_matches_analytic_form() {
        let c = unit_planar();
        let (q1, q2) = (0.4, -1.1);
        let s = SystemState::at_rest(&c, [vec![q1, q2], vec![0.0, 0.0]]);
        let j = compute_jacobians(&c, &s);
        let (s1, c1) = q1.sin_cos();
        let (s12, c12) = (q1 + q2).sin_cos();
        let expected = [[-s1 - s12, -s12], [c1 + c12, c12]];
        for r in 0..2 {
            for k in 0..2 {
                assert!((j.arm[0][(r, k)] - expected[r][k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let c = ChainConfig::default_dual_ur5().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..10 {
            let angles = [
                (0..6).map(|_| rng.gen_range(-PI..PI)).collect::<Vec<_>>(),
                (0..6).map(|_| rng.gen_range(-PI..PI)).collect::<Vec<_>>(),
            ];
            let mut s = SystemState::at_rest(&c, angles.clone());
            s.base_orientation = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.0);
            s.refresh_end_effectors(&c);
            let j = compute_jacobians(&c, &s);
            for arm in 0..2 {
                for k in 0..6 {
                    let mut plus = s.clone();
                    plus.joint_angles[arm][k] += h;
                    let mut minus = s.clone();
                    minus.joint_angles[arm][k] -= h;
                    let fp = forward_kinematics(&c, &plus.base_pose(), &plus.joint_angles[0], &plus.joint_angles[1]).unwrap();
                    let fm = forward_kinematics(&c, &minus.base_pose(), &minus.joint_angles[0], &minus.joint_angles[1]).unwrap();
                    let lin = (fp[arm].translation.vector - fm[arm].translation.vector) / (2.0 * h);
                    let ang = (fp[arm].rotation * fm[arm].rotation.inverse()).scaled_axis() / (2.0 * h);
                    let col = j.arm[arm].column(k);
                    let analytic = Vector3::new(col[0], col[1], col[2]);
                    let analytic_w = Vector3::new(col[3], col[4], col[5]);
                    let rel = (lin - analytic).norm() / analytic.norm().max(1e-3);
                    assert!(rel < 1e-5, "linear rel error {rel}");
                    assert!((ang - analytic_w).norm() < 1e-5);
                }
                // base translation and rotation columns
                for k in 0..6 {
                    let mut plus = s.clone();
                    let mut minus = s.clone();
                    if k < 3 {
                        plus.base_position[k] += h;
                        minus.base_position[k] -= h;
                    } else {
                        let mut e = Vector3::zeros();
                        e[k - 3] = h;
                        plus.base_orientation = UnitQuaternion::from_scaled_axis(e) * s.base_orientation;
                        minus.base_orientation = UnitQuaternion::from_scaled_axis(-e) * s.base_orientation;
                    }
                    let fp = forward_kinematics(&c, &plus.base_pose(), &plus.joint_angles[0], &plus.joint_angles[1]).unwrap();
                    let fm = forward_kinematics(&c, &minus.base_pose(), &minus.joint_angles[0], &minus.joint_angles[1]).unwrap();
                    let lin = (fp[arm].translation.vector - fm[arm].translation.vector) / (2.0 * h);
                    let col = j.base[arm].column(k);
                    let analytic = Vector3::new(col[0], col[1], col[2]);
                    assert!((lin - analytic).norm() / analytic.norm().max(1e-3) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_rates_predict_zero_ee_velocity() {
        let c = ChainConfig::default_dual_ur5().build().unwrap();
        let s = SystemState::at_rest(&c, [vec![0.3; 6], vec![-0.2; 6]]);
        let j = compute_jacobians(&c, &s);
        let v = &j.arm[0] * nalgebra::DVector::zeros(6) + j.base[0] * nalgebra::Vector6::zeros();
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn link_samples_span_each_link() {
        let c = unit_planar();
        let s = SystemState::at_rest(&c, [vec![0.0, 0.0], vec![0.0, 0.0]]);
        let f = state_frames(&c, &s);
        let pts = link_sample_points(&f[0], 5);
        assert_eq!(pts.len(), 10);
        assert!((pts[0] - Vector3::zeros()).norm() < 1e-15);
        assert!((pts[9] - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
    }
}
