use nalgebra::{Matrix3, Vector3};

use super::rotation::RotationMatrix;
use super::{PointCloud, PoseError, Result};

/// Least-squares rotation `R` minimizing `Σ ‖R (a_i − ā) − (b_i − b̄)‖²` for
/// corresponding points.
pub fn kabsch_estimate(a: &PointCloud, b: &PointCloud) -> Result<RotationMatrix> {
    kabsch_points(&a.points, &b.points)
}

pub fn kabsch_points(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<RotationMatrix> {
    if a.len() != b.len() {
        return Err(PoseError::InvalidInput(format!("cloud sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(PoseError::Degenerate("need at least 3 corresponding points".into()));
    }
    let ca = a.iter().sum::<Vector3<f64>>() / a.len() as f64;
    let cb = b.iter().sum::<Vector3<f64>>() / b.len() as f64;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    if sv[0] <= 0.0 || sv[1] <= 1e-10 * sv[0] {
        return Err(PoseError::Degenerate("points are collinear".into()));
    }
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    Ok(RotationMatrix::project(&r))
}

/// Nearest-neighbour ICP refinement of a rotation about the centroids,
/// starting from `initial`.
pub fn icp_refine(a: &PointCloud, b: &PointCloud, initial: &RotationMatrix, iterations: usize) -> Result<RotationMatrix> {
    let ca = a.centroid();
    let cb = b.centroid();
    let pa: Vec<Vector3<f64>> = a.points.iter().map(|p| p - ca).collect();
    let pb: Vec<Vector3<f64>> = b.points.iter().map(|p| p - cb).collect();
    let mut r = *initial;
    let mut last_err = f64::INFINITY;
    for _ in 0..iterations {
        let moved: Vec<Vector3<f64>> = pa.iter().map(|p| r.matrix() * p).collect();
        let mut matched = Vec::with_capacity(pa.len());
        let mut err = 0.0;
        for m in &moved {
            let (j, d) = pb
                .iter()
                .enumerate()
                .map(|(j, q)| (j, (q - m).norm_squared()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .ok_or_else(|| PoseError::InvalidInput("empty target cloud".into()))?;
            matched.push(pb[j]);
            err += d;
        }
        r = kabsch_points(&pa, &matched)?;
        if (last_err - err).abs() <= 1e-12 * last_err.max(1.0) {
            break;
        }
        last_err = err;
    }
    Ok(r)
}
