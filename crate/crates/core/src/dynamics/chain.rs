use std::f64::consts::FRAC_PI_2;

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{DynamicsError, Result};

/// One revolute joint and the rigid link it drives.
///
/// The link frame is `parent_frame * offset * Rot(axis, θ)`; `com` and
/// `inertia` are expressed in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub parent: Option<usize>,
    pub axis: Unit<Vector3<f64>>,
    pub offset: Isometry3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmChain {
    /// Pose of the first joint frame relative to the base frame.
    pub mount: Isometry3<f64>,
    pub links: Vec<LinkSpec>,
    /// End-effector frame relative to the last link frame.
    pub tool: Isometry3<f64>,
}

impl ArmChain {
    pub fn dof(&self) -> usize {
        self.links.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseSpec {
    pub mass: f64,
    /// Inertia about the base centroid, base frame.
    pub inertia: Matrix3<f64>,
}

/// Free-floating base carrying two serial arms.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub base: BaseSpec,
    pub arms: [ArmChain; 2],
}

/// Structured description of a chain, as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainConfig {
    /// Two 2-link arms with joint axes along z, links along the local x axis.
    Planar {
        link_lengths: [f64; 2],
        link_masses: [f64; 2],
        base_mass: f64,
        base_side: f64,
        /// Mount position of each arm on the base (base frame, m).
        mount_offsets: [[f64; 3]; 2],
        /// Concentrate each link's mass at its distal end.
        #[serde(default)]
        point_masses: bool,
    },
    /// Two UR5-like 6-DoF arms on the +x face of a cubic base.
    DualUr5 {
        link_masses: [f64; 6],
        base_mass: f64,
        base_side: f64,
        /// Lateral (y) offset of each mount from the face centre.
        mount_spacing: f64,
    },
}

impl ChainConfig {
    pub fn default_planar() -> Self {
        ChainConfig::Planar {
            link_lengths: [0.5, 0.5],
            link_masses: [4.0, 3.0],
            base_mass: 100.0,
            base_side: 1.0,
            mount_offsets: [[0.5, 0.3, 0.0], [0.5, -0.3, 0.0]],
            point_masses: false,
        }
    }

    pub fn default_dual_ur5() -> Self {
        ChainConfig::DualUr5 {
            link_masses: [3.7, 8.4, 2.3, 1.2, 1.2, 0.25],
            base_mass: 400.0,
            base_side: 1.0,
            mount_spacing: 0.35,
        }
    }

    pub fn build(&self) -> Result<KinematicChain> {
        let chain = match self {
            ChainConfig::Planar {
                link_lengths,
                link_masses,
                base_mass,
                base_side,
                mount_offsets,
                point_masses,
            } => {
                let mounts = mount_offsets.map(|m| Isometry3::translation(m[0], m[1], m[2]));
                KinematicChain::planar(*link_lengths, *link_masses, *base_mass, *base_side, mounts, *point_masses)
            }
            ChainConfig::DualUr5 {
                link_masses,
                base_mass,
                base_side,
                mount_spacing,
            } => KinematicChain::dual_ur5(*link_masses, *base_mass, *base_side, *mount_spacing),
        };
        chain.validate()?;
        Ok(chain)
    }
}

fn cube_inertia(mass: f64, side: f64) -> Matrix3<f64> {
    Matrix3::identity() * (mass * side * side / 6.0)
}

impl KinematicChain {
    /// Planar 2+2-DoF chain. Links lie along the local x axis; joint axes are z.
    pub fn planar(
        link_lengths: [f64; 2],
        link_masses: [f64; 2],
        base_mass: f64,
        base_side: f64,
        mounts: [Isometry3<f64>; 2],
        point_masses: bool,
    ) -> Self {
        let z = Vector3::z_axis();
        let arm = |mount: Isometry3<f64>| {
            let links = (0..2)
                .map(|j| {
                    let l = link_lengths[j];
                    let m = link_masses[j];
                    let (com, inertia) = if point_masses {
                        (Vector3::new(l, 0.0, 0.0), Matrix3::identity() * 1e-12)
                    } else {
                        let rod = m * l * l / 12.0;
                        (
                            Vector3::new(l / 2.0, 0.0, 0.0),
                            Matrix3::from_diagonal(&Vector3::new(1e-4 * m, rod, rod)),
                        )
                    };
                    let offset = if j == 0 {
                        Isometry3::identity()
                    } else {
                        Isometry3::translation(link_lengths[j - 1], 0.0, 0.0)
                    };
                    LinkSpec {
                        parent: j.checked_sub(1),
                        axis: z,
                        offset,
                        mass: m,
                        com,
                        inertia,
                    }
                })
                .collect();
            ArmChain {
                mount,
                links,
                tool: Isometry3::translation(link_lengths[1], 0.0, 0.0),
            }
        };
        Self {
            base: BaseSpec {
                mass: base_mass,
                inertia: cube_inertia(base_mass, base_side),
            },
            arms: [arm(mounts[0]), arm(mounts[1])],
        }
    }

    /// Two UR5-like arms from standard DH parameters, mounted with their
    /// first joint axis along the base +x axis.
    pub fn dual_ur5(link_masses: [f64; 6], base_mass: f64, base_side: f64, mount_spacing: f64) -> Self {
        const D: [f64; 6] = [0.089159, 0.0, 0.0, 0.10915, 0.09465, 0.0823];
        const A: [f64; 6] = [0.0, -0.425, -0.39225, 0.0, 0.0, 0.0];
        const ALPHA: [f64; 6] = [FRAC_PI_2, 0.0, 0.0, FRAC_PI_2, -FRAC_PI_2, 0.0];
        let dh_fixed = |i: usize| {
            Isometry3::from_parts(
                Translation3::new(A[i], 0.0, D[i]),
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), ALPHA[i]),
            )
        };
        let arm = |y: f64| {
            let links = (0..6)
                .map(|j| {
                    let m = link_masses[j];
                    let len = (A[j] * A[j] + D[j] * D[j]).sqrt();
                    let radius = 0.05;
                    let moment = m * (len * len / 12.0 + radius * radius / 2.0);
                    LinkSpec {
                        parent: j.checked_sub(1),
                        axis: Vector3::z_axis(),
                        offset: if j == 0 { Isometry3::identity() } else { dh_fixed(j - 1) },
                        mass: m,
                        com: Vector3::new(A[j] / 2.0, 0.0, D[j] / 2.0),
                        inertia: Matrix3::identity() * moment,
                    }
                })
                .collect();
            ArmChain {
                mount: Isometry3::from_parts(
                    Translation3::new(base_side / 2.0, y, 0.0),
                    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2),
                ),
                links,
                tool: dh_fixed(5),
            }
        };
        Self {
            base: BaseSpec {
                mass: base_mass,
                inertia: cube_inertia(base_mass, base_side),
            },
            arms: [arm(mount_spacing), arm(-mount_spacing)],
        }
    }

    pub fn dof(&self, arm: usize) -> usize {
        self.arms[arm].dof()
    }

    pub fn total_dof(&self) -> usize {
        self.dof(0) + self.dof(1)
    }

    pub fn total_mass(&self) -> f64 {
        self.base.mass + self.arms.iter().flat_map(|a| a.links.iter()).map(|l| l.mass).sum::<f64>()
    }

    /// Checks the structural invariants. Massless links are allowed (their
    /// inertia must then vanish too); the base must carry mass.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(DynamicsError::InvalidChain(msg));
        if !(self.base.mass > 0.0) {
            return invalid(format!("base mass {} must be positive", self.base.mass));
        }
        if !is_spd(&self.base.inertia) {
            return invalid("base inertia must be symmetric positive definite".into());
        }
        for (a, arm) in self.arms.iter().enumerate() {
            if arm.links.is_empty() {
                return invalid(format!("arm {a} has no links"));
            }
            for (j, link) in arm.links.iter().enumerate() {
                if link.parent != j.checked_sub(1) {
                    return invalid(format!("arm {a} link {j} is not serial"));
                }
                if ((link.axis.norm()) - 1.0).abs() > 1e-12 {
                    return invalid(format!("arm {a} link {j} axis is not unit length"));
                }
                if link.mass < 0.0 || !link.mass.is_finite() {
                    return invalid(format!("arm {a} link {j} mass {} is negative", link.mass));
                }
                let massless = link.mass == 0.0 && link.inertia == Matrix3::zeros();
                if !massless && (link.mass == 0.0 || !is_spd(&link.inertia)) {
                    return invalid(format!("arm {a} link {j} inertia must be symmetric positive definite"));
                }
            }
        }
        Ok(())
    }

    /// Copy of the chain with every arm link massless (a decoupled limit).
    pub fn with_massless_arms(&self) -> Self {
        let mut c = self.clone();
        for arm in &mut c.arms {
            for l in &mut arm.links {
                l.mass = 0.0;
                l.inertia = Matrix3::zeros();
            }
        }
        c
    }

    pub fn with_base_mass_scale(&self, scale: f64) -> Self {
        let mut c = self.clone();
        c.base.mass *= scale;
        c.base.inertia *= scale;
        c
    }
}

fn is_spd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1.0) && m.cholesky().is_some()
}
