use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rotation::uniform_rotation;
use super::{PoseError, Result};

/// Points with unit outward normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(PoseError::InvalidInput(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(PoseError::InvalidInput(format!("normal {i} is not unit length")));
        }
        if points.iter().chain(&normals).any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(PoseError::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.len().max(1) as f64
    }

    /// `R · cloud`, normals included.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| r * p).collect(),
            normals: self.normals.iter().map(|n| r * n).collect(),
        }
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| p + t).collect(),
            normals: self.normals.clone(),
        }
    }

    /// Adds isotropic Gaussian noise to the positions.
    pub fn with_noise(&self, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        if sigma > 0.0 {
            for p in &mut out.points {
                *p += Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
        out
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            normals: order.iter().map(|&i| self.normals[i]).collect(),
        }
    }

    /// Text format: one `x y z nx ny nz` line per point, `#` comments.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# x y z nx ny nz")?;
        for (p, n) in self.points.iter().zip(&self.normals) {
            writeln!(f, "{:e} {:e} {:e} {:e} {:e} {:e}", p.x, p.y, p.z, n.x, n.y, n.z)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let vals: Vec<f64> = body
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| PoseError::Parse(format!("line {}: {e}", i + 1)))?;
            if vals.len() != 6 {
                return Err(PoseError::Parse(format!("line {}: expected 6 values, found {}", i + 1, vals.len())));
            }
            points.push(Vector3::new(vals[0], vals[1], vals[2]));
            normals.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
        Self::new(points, normals)
    }
}

/// Surface primitives, centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Box { dims: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn default_box() -> Self {
        Shape::Box { dims: [1.0, 0.7, 0.4] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Box { dims } => dims.iter().all(|d| *d > 0.0 && d.is_finite()),
            Shape::Cylinder { radius, height } => radius > 0.0 && height > 0.0 && radius.is_finite() && height.is_finite(),
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(PoseError::InvalidShape(format!("{self:?}")))
        }
    }

    /// Radius of the smallest origin-centered sphere containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { dims } => Vector3::from(dims).norm() / 2.0,
            Shape::Cylinder { radius, height } => radius.hypot(height / 2.0),
            Shape::Sphere { radius } => radius,
        }
    }

    fn sample_point(&self, rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Shape::Box { dims } => {
                let [a, b, c] = dims;
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let face = pick(&areas, rng);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = Vector3::from_fn(|i, _| (rng.gen::<f64>() - 0.5) * dims[i]);
                p[axis] = sign * dims[axis] / 2.0;
                let mut n = Vector3::zeros();
                n[axis] = sign;
                (p, n)
            }
            Shape::Cylinder { radius, height } => {
                let lateral = 2.0 * std::f64::consts::PI * radius * height;
                let cap = std::f64::consts::PI * radius * radius;
                match pick(&[lateral, cap, cap], rng) {
                    0 => {
                        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                        let n = Vector3::new(phi.cos(), phi.sin(), 0.0);
                        let z = (rng.gen::<f64>() - 0.5) * height;
                        (n * radius + Vector3::z() * z, n)
                    }
                    k => {
                        let sign = if k == 1 { 1.0 } else { -1.0 };
                        let r = radius * rng.gen::<f64>().sqrt();
                        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                        (
                            Vector3::new(r * phi.cos(), r * phi.sin(), sign * height / 2.0),
                            Vector3::z() * sign,
                        )
                    }
                }
            }
            Shape::Sphere { radius } => {
                let n = loop {
                    let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    if v.norm() > 1e-9 {
                        break v.normalize();
                    }
                };
                (n * radius, n)
            }
        }
    }
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Area-uniform surface samples scaled by the bounding radius, then
/// Gaussian position noise `sigma` in those normalized units.
pub fn sample_surface(shape: &Shape, n: usize, sigma: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_surface_with(shape, n, sigma, &mut rng)
}

pub fn sample_surface_with(shape: &Shape, n: usize, sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    shape.validate()?;
    if n < 4 {
        return Err(PoseError::InvalidInput(format!("need at least 4 points, asked for {n}")));
    }
    if !(sigma >= 0.0) {
        return Err(PoseError::InvalidInput("noise must be non-negative".into()));
    }
    let scale = 1.0 / shape.bounding_radius();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nrm) = shape.sample_point(rng);
        points.push(p * scale);
        normals.push(nrm);
    }
    Ok(PointCloud { points, normals }.with_noise(sigma, rng))
}

/// Two views of `cloud` related by a uniformly random rotation:
/// `b = R_p · a` with `a = cloud`.
pub fn make_rotation_pair(cloud: &PointCloud, seed: u64) -> (PointCloud, PointCloud, Matrix3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform_rotation(&mut rng);
    (cloud.clone(), cloud.rotated(&r), r)
}
