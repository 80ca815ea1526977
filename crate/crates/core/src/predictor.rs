//! Target-point prediction for a spinning object.
//!
//! Each target moves on a circle in the plane perpendicular to the spin
//! axis. An EKF over `[x, y, ς, v]` in that plane (heading `ς`, speed `v`)
//! produces one-step-ahead positions that are lifted back to 3D.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x4, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::wrap_angle;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("circle fit failed: {0}")]
    Fit(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PredictorError>;

/// Rotation plane of one target point: basis `{u, v, n}`, circle centre
/// `c` (on the plane through the origin) and axial offset `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub axis: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub center: Vector3<f64>,
    pub offset: f64,
    pub radius: f64,
}

/// `u` from the world axis least aligned with `n` (lowest index on ties),
/// `v = n × u`.
pub fn plane_basis(axis: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n = axis
        .try_normalize(1e-12)
        .ok_or_else(|| PredictorError::InvalidInput("rotation axis has zero length".into()))?;
    let mut k = 0;
    for i in 1..3 {
        if n[i].abs() < n[k].abs() {
            k = i;
        }
    }
    let e = Vector3::ith(k, 1.0);
    let u = (e - n * n.dot(&e)).normalize();
    Ok((u, n.cross(&u)))
}

impl PlaneFrame {
    /// Frame with a known centre, e.g. before enough observations exist.
    pub fn with_center(axis: &Vector3<f64>, center_point: &Vector3<f64>, radius: f64) -> Result<Self> {
        let (u, v) = plane_basis(axis)?;
        let n = u.cross(&v);
        let offset = n.dot(center_point);
        Ok(Self {
            axis: n,
            u,
            v,
            center: center_point - n * offset,
            offset,
            radius,
        })
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let d = p - self.center;
        Vector2::new(self.u.dot(&d), self.v.dot(&d))
    }

    pub fn lift(&self, q: &Vector2<f64>) -> Vector3<f64> {
        self.center + self.u * q.x + self.v * q.y + self.axis * self.offset
    }

    /// Centre of the fitted circle in 3D.
    pub fn circle_center(&self) -> Vector3<f64> {
        self.center + self.axis * self.offset
    }
}

/// Least-squares circle fit of observations projected onto the plane
/// normal to `axis`.
pub fn build_plane_frame(axis: &Vector3<f64>, observations: &[Vector3<f64>]) -> Result<PlaneFrame> {
    if observations.len() < 3 {
        return Err(PredictorError::Fit(format!("need 3 observations, got {}", observations.len())));
    }
    let (u, v) = plane_basis(axis)?;
    let n = u.cross(&v);
    // x² + y² + D x + E y + F = 0
    let m = observations.len();
    let mut a = nalgebra::DMatrix::zeros(m, 3);
    let mut b = nalgebra::DVector::zeros(m);
    let mut h = 0.0;
    for (i, p) in observations.iter().enumerate() {
        let (x, y) = (u.dot(p), v.dot(p));
        a[(i, 0)] = x;
        a[(i, 1)] = y;
        a[(i, 2)] = 1.0;
        b[i] = -(x * x + y * y);
        h += n.dot(p);
    }
    h /= m as f64;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-9 * smax.max(1.0)) {
        return Err(PredictorError::Fit("observations are collinear".into()));
    }
    let sol = svd
        .solve(&b, 1e-14)
        .map_err(|e| PredictorError::Fit(e.to_string()))?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return Err(PredictorError::Fit("fitted radius is not real".into()));
    }
    Ok(PlaneFrame {
        axis: n,
        u,
        v,
        center: u * cx + v * cy,
        offset: h,
        radius: r2.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    pub p0: [f64; 4],
    pub q: [f64; 4],
    /// Measurement noise std per planar axis (m).
    pub measurement_sigma: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            p0: [0.01, 0.01, 0.1, 0.1],
            q: [1e-6, 1e-6, 1e-5, 1e-5],
            measurement_sigma: 0.005,
        }
    }
}

/// EKF state `X = [x, y, ς, v]` with covariance, noise models, control
/// cycle `dt` and angular-rate input.
#[derive(Debug, Clone, PartialEq)]
pub struct Ekf {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub dt: f64,
    pub rate: f64,
}

/// `f(X)`: constant speed, heading turning at `rate`.
pub fn motion_model(x: &Vector4<f64>, dt: f64, rate: f64) -> Vector4<f64> {
    let (s, c) = x[2].sin_cos();
    Vector4::new(x[0] + x[3] * c * dt, x[1] + x[3] * s * dt, wrap_angle(x[2] + rate * dt), x[3])
}

/// `∂f/∂X`.
pub fn motion_jacobian(x: &Vector4<f64>, dt: f64) -> Matrix4<f64> {
    let (s, c) = x[2].sin_cos();
    let v = x[3];
    Matrix4::new(
        1.0, 0.0, -v * s * dt, c * dt, //
        0.0, 1.0, v * c * dt, s * dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

fn measurement_matrix() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

fn symmetrize(p: &mut Matrix4<f64>) {
    *p = (*p + p.transpose()) * 0.5;
}

impl Ekf {
    pub fn new(x: Vector4<f64>, config: &EkfConfig, dt: f64, rate: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(PredictorError::InvalidInput(format!("control cycle {dt} must be positive")));
        }
        if config.p0.iter().chain(&config.q).any(|v| !(*v >= 0.0)) || !(config.measurement_sigma >= 0.0) {
            return Err(PredictorError::InvalidInput("noise parameters must be non-negative".into()));
        }
        let s2 = config.measurement_sigma * config.measurement_sigma;
        Ok(Self {
            x,
            p: Matrix4::from_diagonal(&Vector4::from(config.p0)),
            q: Matrix4::from_diagonal(&Vector4::from(config.q)),
            r: Matrix2::identity() * s2,
            dt,
            rate,
        })
    }

    /// Starts at the second measurement `z1`, heading along the chord
    /// `z0 → z1` advanced by `rate·dt`, speed `radius·rate`.
    pub fn from_measurements(
        z0: &Vector2<f64>,
        z1: &Vector2<f64>,
        radius: f64,
        config: &EkfConfig,
        dt: f64,
        rate: f64,
    ) -> Result<Self> {
        let d = z1 - z0;
        let heading = wrap_angle(d.y.atan2(d.x) + rate * dt);
        Self::new(Vector4::new(z1.x, z1.y, heading, radius * rate.abs()), config, dt, rate)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x[0], self.x[1])
    }

    pub fn predict(&mut self) {
        let f = motion_jacobian(&self.x, self.dt);
        self.x = motion_model(&self.x, self.dt, self.rate);
        self.p = f * self.p * f.transpose() + self.q;
        symmetrize(&mut self.p);
    }

    /// Joseph-form correction with `H = [I₂ 0]`. Returns the innovation.
    pub fn update(&mut self, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(PredictorError::InvalidInput("non-finite measurement".into()));
        }
        let h = measurement_matrix();
        let innovation = z - h * self.x;
        let s = h * self.p * h.transpose() + self.r;
        let s_inv = s.try_inverse().ok_or(PredictorError::SingularInnovation)?;
        if !s_inv.iter().all(|v| v.is_finite()) {
            return Err(PredictorError::SingularInnovation);
        }
        let k = self.p * h.transpose() * s_inv;
        self.x += k * innovation;
        self.x[2] = wrap_angle(self.x[2]);
        let a = Matrix4::identity() - k * h;
        self.p = a * self.p * a.transpose() + k * self.r * k.transpose();
        symmetrize(&mut self.p);
        Ok(innovation)
    }

    /// Planar position one control cycle ahead, without changing the filter.
    pub fn one_step_position(&self) -> Vector2<f64> {
        let n = motion_model(&self.x, self.dt, self.rate);
        Vector2::new(n[0], n[1])
    }

    pub fn min_covariance_eigenvalue(&self) -> f64 {
        self.p.symmetric_eigenvalues().min()
    }
}

/// One-step-ahead target position in 3D.
pub fn predict_target(ekf: &Ekf, frame: &PlaneFrame) -> Vector3<f64> {
    frame.lift(&ekf.one_step_position())
}

/// Right-handed check of a frame's basis, for diagnostics.
pub fn basis_matrix(frame: &PlaneFrame) -> Matrix3<f64> {
    Matrix3::from_columns(&[frame.u, frame.v, frame.axis])
}

/// One row of a filter trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterTraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub varsigma: f64,
    pub v: f64,
    pub meas_x: f64,
    pub meas_y: f64,
    pub pred_err: f64,
}

pub fn write_filter_trace(path: impl AsRef<Path>, rows: &[FilterTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
