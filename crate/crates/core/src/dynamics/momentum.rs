use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use super::kinematics::skew;
use super::{state_frames, DynamicsError, JacobianSet, KinematicChain, Result, SystemState};

/// Momentum map at one configuration: total `[linear; angular]` momentum
/// (angular about the base origin) equals `H_b ṙ_b + H_r¹ Θ̇₁ + H_r² Θ̇₂`.
#[derive(Debug, Clone)]
pub struct MomentumMatrices {
    pub h_b: Matrix6<f64>,
    pub h_r: [DMatrix<f64>; 2],
}

pub fn compute_coupling_inertia(chain: &KinematicChain, state: &SystemState) -> MomentumMatrices {
    let frames = state_frames(chain, state);
    let rb = state.base_position;
    let rot = state.base_orientation.to_rotation_matrix();

    let mut h_b = Matrix6::zeros();
    h_b.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    h_b.fixed_view_mut::<3, 3>(0, 0).scale_mut(chain.base.mass);
    h_b.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(rot * chain.base.inertia * rot.transpose()));

    let mut h_r = [
        DMatrix::zeros(6, chain.dof(0)),
        DMatrix::zeros(6, chain.dof(1)),
    ];
    for (a, (arm, f)) in chain.arms.iter().zip(&frames).enumerate() {
        for (j, (link, frame)) in arm.links.iter().zip(&f.links).enumerate() {
            if link.mass == 0.0 {
                continue;
            }
            let m = link.mass;
            let com = frame.transform_point(&link.com.into()).coords;
            let r = com - rb;
            let rx = skew(&r);
            let r_mat = frame.rotation.to_rotation_matrix();
            let inertia = r_mat * link.inertia * r_mat.transpose();

            // base columns: v = v_b - [r]x w_b, w = w_b
            let mut top = h_b.fixed_view_mut::<3, 3>(0, 0);
            top += nalgebra::Matrix3::identity() * m;
            let mut tr = h_b.fixed_view_mut::<3, 3>(0, 3);
            tr -= rx * m;
            let mut bl = h_b.fixed_view_mut::<3, 3>(3, 0);
            bl += rx * m;
            let mut br = h_b.fixed_view_mut::<3, 3>(3, 3);
            br += inertia - rx * rx * m;

            for k in 0..=j {
                let z = f.joint_axes[k];
                let jv: Vector3<f64> = z.cross(&(com - f.joint_origins[k]));
                let lin = jv * m;
                let ang = rx * lin + inertia * z;
                for i in 0..3 {
                    h_r[a][(i, k)] += lin[i];
                    h_r[a][(i + 3, k)] += ang[i];
                }
            }
        }
    }
    MomentumMatrices { h_b, h_r }
}

/// Base twist that keeps the total momentum at zero for the given joint rates.
pub fn base_velocity_from_momentum(mats: &MomentumMatrices, rates1: &[f64], rates2: &[f64]) -> Result<Vector6<f64>> {
    for (h, r) in mats.h_r.iter().zip([rates1, rates2]) {
        if h.ncols() != r.len() {
            return Err(DynamicsError::Dimension {
                expected: h.ncols(),
                found: r.len(),
            });
        }
    }
    let rhs = &mats.h_r[0] * DVector::from_column_slice(rates1) + &mats.h_r[1] * DVector::from_column_slice(rates2);
    let rhs = Vector6::from_iterator(rhs.iter().copied());
    let chol = mats
        .h_b
        .cholesky()
        .ok_or_else(|| DynamicsError::Internal("base coupling inertia is not positive definite".into()))?;
    Ok(-chol.solve(&rhs))
}

/// Total `[linear; angular about base origin]` momentum of a state.
pub fn total_momentum(chain: &KinematicChain, state: &SystemState) -> Vector6<f64> {
    let mats = compute_coupling_inertia(chain, state);
    let p = mats.h_b * state.base_twist()
        + &mats.h_r[0] * DVector::from_column_slice(&state.joint_velocities[0])
        + &mats.h_r[1] * DVector::from_column_slice(&state.joint_velocities[1]);
    Vector6::from_iterator(p.iter().copied())
}

/// End-effector twist of each arm as a function of all joint rates (arm 1
/// then arm 2) with the base reacting freely:
/// `J*ᵢ = [J_rⁱ]ᵢ − J_bⁱ H_b⁻¹ [H_r¹ H_r²]`.
pub fn generalized_jacobians(mats: &MomentumMatrices, jacs: &JacobianSet) -> Result<[DMatrix<f64>; 2]> {
    let n1 = mats.h_r[0].ncols();
    let n2 = mats.h_r[1].ncols();
    let mut hr = DMatrix::zeros(6, n1 + n2);
    hr.view_mut((0, 0), (6, n1)).copy_from(&mats.h_r[0]);
    hr.view_mut((0, n1), (6, n2)).copy_from(&mats.h_r[1]);
    let hb_inv = mats
        .h_b
        .try_inverse()
        .ok_or_else(|| DynamicsError::Internal("base coupling inertia is singular".into()))?;
    let hb_inv = DMatrix::from_iterator(6, 6, hb_inv.iter().copied());
    let reaction = hb_inv * hr;
    let build = |a: usize| {
        let jb = DMatrix::from_iterator(6, 6, jacs.base[a].iter().copied());
        let mut g = -(jb * &reaction);
        let off = if a == 0 { 0 } else { n1 };
        let mut block = g.view_mut((0, off), (6, jacs.arm[a].ncols()));
        block += &jacs.arm[a];
        g
    };
    Ok([build(0), build(1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{body_poses, compute_jacobians, ChainConfig};
    use nalgebra::{Isometry3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-body momentum about the inertial origin from finite differences
    /// of body poses, independent of the coupling matrices.
    fn fd_momentum(chain: &KinematicChain, s: &SystemState) -> (Vector3<f64>, Vector3<f64>) {
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut x = s.clone();
            x.base_position += s.base_linear_velocity * sign * h;
            x.base_orientation = UnitQuaternion::from_scaled_axis(s.base_angular_velocity * sign * h) * s.base_orientation;
            for a in 0..2 {
                for (q, v) in x.joint_angles[a].iter_mut().zip(&s.joint_velocities[a]) {
                    *q += v * sign * h;
                }
            }
            body_poses(chain, &x)
        };
        let plus = shifted(1.0);
        let minus = shifted(-1.0);
        let now = body_poses(chain, s);
        let mut p = Vector3::zeros();
        let mut l = Vector3::zeros();
        for ((b, bp), bm) in now.iter().zip(&plus).zip(&minus) {
            let v = (bp.com - bm.com) / (2.0 * h);
            let w = (bp.rotation * bm.rotation.inverse()).scaled_axis() / (2.0 * h);
            p += v * b.mass;
            l += b.com.cross(&(v * b.mass)) + b.inertia * w;
        }
        (p, l)
    }

    fn random_state(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> SystemState {
        let angles = [
            (0..chain.dof(0)).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            (0..chain.dof(1)).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        ];
        let mut s = SystemState::at_rest(chain, angles);
        s.base_position = Vector3::new(rng.gen(), rng.gen(), rng.gen());
        s.base_orientation = UnitQuaternion::from_euler_angles(rng.gen(), rng.gen(), rng.gen());
        s.base_linear_velocity = Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 0.2;
        s.base_angular_velocity = Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 0.2;
        for a in 0..2 {
            s.joint_velocities[a] = (0..chain.dof(a)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        }
        s.refresh_end_effectors(chain);
        s
    }

    #[test]
    fn matrices_match_finite_difference_momentum() {
        let chain = ChainConfig::default_dual_ur5().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_state(&chain, &mut rng);
            let m = total_momentum(&chain, &s);
            let (p, l0) = fd_momentum(&chain, &s);
            let lin = m.fixed_rows::<3>(0).into_owned();
            // shift the angular part from the base origin to the inertial origin
            let ang = m.fixed_rows::<3>(3).into_owned() + s.base_position.cross(&lin);
            assert!((lin - p).norm() < 1e-6 * p.norm().max(1.0), "{lin} vs {p}");
            assert!((ang - l0).norm() < 1e-6 * l0.norm().max(1.0), "{ang} vs {l0}");
        }
    }

    #[test]
    fn massless_arms_decouple() {
        let chain = ChainConfig::default_dual_ur5().build().unwrap().with_massless_arms();
        let s = SystemState::at_rest(&chain, [vec![0.4; 6], vec![-1.0; 6]]);
        let m = compute_coupling_inertia(&chain, &s);
        assert_eq!(m.h_r[0].norm(), 0.0);
        assert_eq!(m.h_r[1].norm(), 0.0);
        let mut expected = Matrix6::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&(nalgebra::Matrix3::identity() * chain.base.mass));
        expected.fixed_view_mut::<3, 3>(3, 3).copy_from(&chain.base.inertia);
        assert!((m.h_b - expected).norm() < 1e-12);
    }

    #[test]
    fn base_inertia_is_symmetric_positive_definite() {
        let chain = ChainConfig::default_dual_ur5().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_state(&chain, &mut rng);
            let m = compute_coupling_inertia(&chain, &s);
            assert!((m.h_b - m.h_b.transpose()).norm() < 1e-10);
            assert!(m.h_b.symmetric_eigenvalues().min() > 0.0);
        }
    }

    fn point_mass_planar() -> KinematicChain {
        KinematicChain::planar(
            [0.5, 0.5],
            [4.0, 3.0],
            100.0,
            1.0,
            [Isometry3::translation(0.5, 0.3, 0.0), Isometry3::translation(0.5, -0.3, 0.0)],
            true,
        )
    }

    /// Analytic planar point-mass momentum: masses sit at the link tips.
    fn planar_point_momentum(s: &SystemState, mounts: [(f64, f64); 2]) -> (Vector3<f64>, Vector3<f64>) {
        let (m1, m2, l1, l2) = (4.0, 3.0, 0.5, 0.5);
        let vb = s.base_linear_velocity;
        let wb = s.base_angular_velocity.z;
        let yaw = s.base_orientation.euler_angles().2;
        let mut p = vb * 100.0;
        let mut lz = 1e2 / 6.0 * wb;
        for a in 0..2 {
            let (q1, q2) = (s.joint_angles[a][0], s.joint_angles[a][1]);
            let (d1, d2) = (s.joint_velocities[a][0], s.joint_velocities[a][1]);
            let (mx, my) = mounts[a];
            let a1 = yaw + q1;
            let a12 = a1 + q2;
            let mount = Vector3::new(mx * yaw.cos() - my * yaw.sin(), mx * yaw.sin() + my * yaw.cos(), 0.0);
            let p1 = mount + Vector3::new(l1 * a1.cos(), l1 * a1.sin(), 0.0);
            let p2 = p1 + Vector3::new(l2 * a12.cos(), l2 * a12.sin(), 0.0);
            let w1 = wb + d1;
            let w12 = w1 + d2;
            let v1 = vb + Vector3::new(-mount.y * wb - l1 * a1.sin() * w1, mount.x * wb + l1 * a1.cos() * w1, 0.0);
            let v2 = v1 + Vector3::new(-l2 * a12.sin() * w12, l2 * a12.cos() * w12, 0.0);
            p += v1 * m1 + v2 * m2;
            lz += m1 * (p1.x * v1.y - p1.y * v1.x) + m2 * (p2.x * v2.y - p2.y * v2.x);
        }
        (p, Vector3::new(0.0, 0.0, lz))
    }

    #[test]
    fn planar_point_masses_match_brute_force() {
        let chain = point_mass_planar();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut s = SystemState::at_rest(
                &chain,
                [vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)], vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]],
            );
            s.base_orientation = UnitQuaternion::from_euler_angles(0.0, 0.0, rng.gen_range(-3.0..3.0));
            s.base_linear_velocity = Vector3::new(rng.gen(), rng.gen(), 0.0);
            s.base_angular_velocity = Vector3::new(0.0, 0.0, rng.gen());
            for a in 0..2 {
                s.joint_velocities[a] = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            }
            let m = total_momentum(&chain, &s);
            let (p, l) = planar_point_momentum(&s, [(0.5, 0.3), (0.5, -0.3)]);
            assert!((m.fixed_rows::<3>(0) - p).norm() < 1e-10);
            assert!((m.fixed_rows::<3>(3) - l).norm() < 1e-10);
        }
    }

    #[test]
    fn single_joint_reaction_balances_momentum() {
        let chain = point_mass_planar();
        let s = SystemState::at_rest(&chain, [vec![0.6, -1.2], vec![-0.6, 1.2]]);
        let mats = compute_coupling_inertia(&chain, &s);
        let twist = base_velocity_from_momentum(&mats, &[0.7, 0.0], &[0.0, 0.0]).unwrap();
        let mut moving = s.clone();
        moving.joint_velocities[0] = vec![0.7, 0.0];
        moving.set_base_twist(&twist);
        let (p, l) = planar_point_momentum(&moving, [(0.5, 0.3), (0.5, -0.3)]);
        assert!(p.norm() < 1e-10 && l.norm() < 1e-10);
        assert!(twist.norm() > 1e-3);
    }

    #[test]
    fn zero_rates_and_linearity() {
        let chain = ChainConfig::default_dual_ur5().build().unwrap();
        let s = SystemState::at_rest(&chain, [vec![0.3, -0.5, 1.0, 0.2, 0.1, 0.0], vec![0.1; 6]]);
        let mats = compute_coupling_inertia(&chain, &s);
        assert_eq!(base_velocity_from_momentum(&mats, &[0.0; 6], &[0.0; 6]).unwrap(), Vector6::zeros());
        let r1 = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let r2 = [0.6, 0.5, -0.4, 0.3, 0.2, 0.1];
        let base = base_velocity_from_momentum(&mats, &r1, &r2).unwrap();
        let k = 3.5;
        let scaled = base_velocity_from_momentum(&mats, &r1.map(|v| v * k), &r2.map(|v| v * k)).unwrap();
        assert!((scaled - base * k).norm() < 1e-12 * scaled.norm().max(1.0));
        assert!(base_velocity_from_momentum(&mats, &r1[..5], &r2).is_err());
    }

    #[test]
    fn mirrored_motion_cancels_lateral_coupling() {
        let chain = ChainConfig::default_planar().build().unwrap();
        let s = SystemState::at_rest(&chain, [vec![0.6, -1.2], vec![-0.6, 1.2]]);
        let mats = compute_coupling_inertia(&chain, &s);
        let twist = base_velocity_from_momentum(&mats, &[0.5, -0.3], &[-0.5, 0.3]).unwrap();
        assert!(twist[1].abs() < 1e-12, "lateral base velocity {}", twist[1]);
        assert!(twist[5].abs() < 1e-12);
        assert!(twist[0].abs() > 1e-4);
    }

    #[test]
    fn generalized_jacobian_predicts_ee_velocity() {
        let chain = ChainConfig::default_dual_ur5().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_state(&chain, &mut rng);
        let mats = compute_coupling_inertia(&chain, &s);
        let jacs = compute_jacobians(&chain, &s);
        let gen = generalized_jacobians(&mats, &jacs).unwrap();
        let rates = s.stacked_rates();
        let twist = base_velocity_from_momentum(&mats, &s.joint_velocities[0], &s.joint_velocities[1]).unwrap();
        for a in 0..2 {
            let direct = jacs.base[a] * twist
                + Vector6::from_iterator((&jacs.arm[a] * DVector::from_column_slice(&s.joint_velocities[a])).iter().copied());
            let via_gen = &gen[a] * DVector::from_vec(rates.clone());
            for i in 0..6 {
                assert!((direct[i] - via_gen[i]).abs() < 1e-12);
            }
        }
    }
}
