use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{PoseError, Result};

/// Tolerance for accepting a matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Angles below this are treated as no rotation (axis undefined).
const DEGENERATE_ANGLE: f64 = 1e-9;

/// Proper rotation matrix. Construction projects onto SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Nearest rotation in the Frobenius sense.
    pub fn project(m: &Matrix3<f64>) -> Self {
        Self(nearest_rotation(m))
    }

    /// Accepts `m` if it is a rotation within [`ROTATION_TOLERANCE`], then
    /// projects away the residual.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        check_rotation(&m)?;
        Ok(Self::project(&m))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self(rodrigues(axis, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn angle(&self) -> f64 {
        rotation_angle(&self.0)
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

pub fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(PoseError::NotARotation("non-finite entries".into()));
    }
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(PoseError::NotARotation(format!("|RᵀR − I| = {ortho:e}, det = {det}")));
    }
    Ok(())
}

/// SVD projection with the reflection removed.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// `I + sin κ [n]× + (1 − cos κ)[n]×²` for unit `n`.
pub fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.normalize();
    let k = n.cross_matrix();
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Rotation angle in `[0, π]`, accurate at both ends of the range.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = (r.trace() - 1.0) / 2.0;
    let s = skew_vector(r).norm() / 2.0;
    s.atan2(c)
}

fn skew_vector(r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

/// `2 asin(‖R_p − R̂‖_F / (2√2))`: the angle of `R_pᵀ R̂`.
pub fn geodesic_loss(r_p: &Matrix3<f64>, r_e: &Matrix3<f64>) -> f64 {
    let s = (r_p - r_e).norm() / (2.0 * std::f64::consts::SQRT_2);
    2.0 * s.clamp(-1.0, 1.0).asin()
}

/// Uniform (Haar) rotation from a normalized Gaussian quaternion.
pub fn uniform_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        }
    }
}

/// Uniform axis, angle uniform in `[0, max_angle]`.
pub fn bounded_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    rodrigues(&axis, rng.gen_range(0.0..=max_angle))
}

/// Axis, angle and optional rate of a relative rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationEstimate {
    pub rotation: Matrix3<f64>,
    /// Unit axis; meaningless when `degenerate`.
    pub axis: Vector3<f64>,
    /// `κ̂ ∈ [0, π]`.
    pub angle: f64,
    /// `κ̂ / Δt` when a frame interval is known (rad/s).
    pub rate: Option<f64>,
    pub degenerate: bool,
}

impl RotationEstimate {
    pub fn with_interval(mut self, dt: f64) -> Self {
        self.rate = Some(self.angle / dt);
        self
    }
}

/// Recovers `(n̂, κ̂)` with `R n̂ = n̂`. The axis sign follows the skew part.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Result<RotationEstimate> {
    check_rotation(r)?;
    let angle = rotation_angle(r);
    let w = skew_vector(r);
    let mut est = RotationEstimate {
        rotation: *r,
        axis: Vector3::z(),
        angle,
        rate: None,
        degenerate: false,
    };
    if angle < DEGENERATE_ANGLE {
        est.degenerate = true;
        return Ok(est);
    }
    if angle.sin() > 1e-4 {
        est.axis = w / (2.0 * angle.sin());
        est.axis.normalize_mut();
        return Ok(est);
    }
    // near π: n nᵀ = (R + Rᵀ − 2 cos κ I) / (2 (1 − cos κ))
    let c = angle.cos();
    let nn = (r + r.transpose() - Matrix3::identity() * (2.0 * c)) / (2.0 * (1.0 - c));
    let k = (0..3).max_by(|&a, &b| nn[(a, a)].total_cmp(&nn[(b, b)])).unwrap();
    let mut axis = nn.column(k).into_owned().normalize();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    est.axis = axis;
    Ok(est)
}

/// Median-angle rate and sign-aligned mean axis over non-degenerate frames.
pub fn angular_rate(estimates: &[RotationEstimate], dt: f64) -> Result<(f64, Vector3<f64>)> {
    if !(dt > 0.0) {
        return Err(PoseError::InvalidInput(format!("frame interval {dt} must be positive")));
    }
    let valid: Vec<&RotationEstimate> = estimates.iter().filter(|e| !e.degenerate).collect();
    if valid.is_empty() {
        return Err(PoseError::AllDegenerate);
    }
    let mut angles: Vec<f64> = valid.iter().map(|e| e.angle).collect();
    angles.sort_by(f64::total_cmp);
    let m = angles.len();
    let median = if m % 2 == 1 {
        angles[m / 2]
    } else {
        0.5 * (angles[m / 2 - 1] + angles[m / 2])
    };
    let reference = valid[0].axis;
    let sum = valid.iter().fold(Vector3::zeros(), |acc, e| {
        if e.axis.dot(&reference) < 0.0 {
            acc - e.axis
        } else {
            acc + e.axis
        }
    });
    let axis = sum
        .try_normalize(1e-12)
        .ok_or_else(|| PoseError::InvalidInput("axis estimates cancel out".into()))?;
    Ok((median / dt, axis))
}
