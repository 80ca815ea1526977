use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::{sample_surface_with, PointCloud, Shape};
use super::rotation::{bounded_rotation, geodesic_loss, uniform_rotation, RotationMatrix};
use super::{PoseError, Result};
use crate::nn::{Activation, Adam, AdamConfig, BatchNorm, BatchNormCache, Checkpoint, DenseNet, ForwardCache, NamedTensor};

const ASIN_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub shape: Shape,
    pub points: usize,
    /// Position noise in normalized units.
    pub noise: f64,
    /// Largest relative rotation angle in the training distribution (rad).
    pub max_angle: f64,
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            shape: Shape::default_box(),
            points: 128,
            noise: 0.01,
            max_angle: 1.3,
            point_widths: vec![64, 64, 128],
            head_widths: vec![256, 128],
            batch_size: 32,
            steps: 1500,
            lr: 1e-3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let bad = |m: &str| Err(PoseError::InvalidInput(m.to_string()));
        if self.points < 4 {
            return bad("encoder needs at least 4 points per cloud");
        }
        if self.point_widths.is_empty() || self.point_widths.contains(&0) || self.head_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch normalization needs a batch of at least 2");
        }
        if !(self.noise >= 0.0) || !(self.max_angle > 0.0 && self.max_angle <= std::f64::consts::PI) {
            return bad("noise must be non-negative and max_angle in (0, π]");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Shared per-point network with normalization, max-pool, and a head that
/// maps the two pooled codes to six rotation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub point_layers: Vec<DenseNet>,
    pub norms: Vec<BatchNorm>,
    pub head: DenseNet,
}

/// Both clouds centered on their own centroids and expressed in the
/// principal axes `P` of the first, so the network sees `Pᵀ R P`.
pub fn canonicalize(a: &PointCloud, b: &PointCloud) -> (Array2<f64>, Array2<f64>, Matrix3<f64>) {
    let ca = a.centroid();
    let cb = b.centroid();
    let mut cov = Matrix3::zeros();
    for p in &a.points {
        let d = p - ca;
        cov += d * d.transpose();
    }
    cov /= a.len().max(1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    for v in axes.iter_mut().take(2) {
        let k = v.iamax();
        if v[k] < 0.0 {
            *v = -*v;
        }
    }
    axes[2] = axes[0].cross(&axes[1]);
    let frame = Matrix3::from_columns(&[axes[0], axes[1], axes[2]]);
    let rows = |c: &PointCloud, centre: Vector3<f64>| {
        let mut m = Array2::zeros((c.len(), 6));
        for (i, (p, n)) in c.points.iter().zip(&c.normals).enumerate() {
            let q = frame.transpose() * (p - centre);
            let m_n = frame.transpose() * n;
            for k in 0..3 {
                m[[i, k]] = q[k];
                m[[i, 3 + k]] = m_n[k];
            }
        }
        m
    };
    (rows(a, ca), rows(b, cb), frame)
}

/// Columns `b₁, b₂, b₁ × b₂` from two 3-vectors by Gram–Schmidt.
pub fn gram_schmidt(o: &[f64]) -> Matrix3<f64> {
    let a1 = Vector3::new(o[0], o[1], o[2]);
    let a2 = Vector3::new(o[3], o[4], o[5]);
    let b1 = a1.normalize();
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    Matrix3::from_columns(&[b1, b2, b1.cross(&b2)])
}

/// Pulls `∂L/∂R` back to the six raw parameters.
pub fn gram_schmidt_backward(o: &[f64], d_r: &Matrix3<f64>) -> [f64; 6] {
    let a1 = Vector3::new(o[0], o[1], o[2]);
    let a2 = Vector3::new(o[3], o[4], o[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    let b2 = u / nu;
    let g3 = d_r.column(2).into_owned();
    let mut g1 = d_r.column(0).into_owned() + b2.cross(&g3);
    let g2 = d_r.column(1).into_owned() + g3.cross(&b1);
    let du = (g2 - b2 * b2.dot(&g2)) / nu;
    let da2 = du - b1 * b1.dot(&du);
    g1 -= du * b1.dot(&a2) + a2 * b1.dot(&du);
    let da1 = (g1 - b1 * b1.dot(&g1)) / n1;
    [da1.x, da1.y, da1.z, da2.x, da2.y, da2.z]
}

/// Geodesic loss and its gradient with respect to the estimate.
pub fn geodesic_loss_gradient(r_p: &Matrix3<f64>, r_e: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let d = r_e - r_p;
    let norm = d.norm();
    let c = 2.0 * std::f64::consts::SQRT_2;
    let s = norm / c;
    let loss = geodesic_loss(r_p, r_e);
    if norm == 0.0 || s >= ASIN_CLAMP {
        return (loss, Matrix3::zeros());
    }
    let grad = d * (2.0 / (1.0 - s * s).sqrt() / (c * norm));
    (loss, grad)
}

struct PointPass {
    linear: Vec<ForwardCache>,
    norm: Vec<Option<BatchNormCache>>,
    activations: Vec<Array2<f64>>,
    argmax: Array2<usize>,
    pooled: Array2<f64>,
}

impl EncoderNet {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut point_layers = Vec::new();
        let mut norms = Vec::new();
        let mut width = 6;
        for (i, &w) in config.point_widths.iter().enumerate() {
            let mut l = DenseNet::new(&[width, w], Activation::Identity, Activation::Identity);
            l.orthogonal_init(seed.wrapping_add(i as u64), std::f64::consts::SQRT_2);
            point_layers.push(l);
            norms.push(BatchNorm::new(w));
            width = w;
        }
        let mut widths = vec![2 * width];
        widths.extend(&config.head_widths);
        widths.push(6);
        let mut head = DenseNet::new(&widths, Activation::Relu, Activation::Identity);
        head.orthogonal_init(seed.wrapping_add(1000), std::f64::consts::SQRT_2);
        let last = head.layers_mut().last_mut().unwrap();
        last.weight.mapv_inplace(|v| v / std::f64::consts::SQRT_2);
        Ok(Self {
            point_layers,
            norms,
            head,
        })
    }

    pub fn latent_width(&self) -> usize {
        self.point_layers.last().unwrap().output_width()
    }

    /// Runs the shared point network over `clouds` stacked row-wise, each
    /// with `n` points, and max-pools per cloud.
    fn point_forward(&mut self, x: Array2<f64>, n: usize, train: bool) -> Result<PointPass> {
        let clouds = x.nrows() / n;
        let mut linear = Vec::with_capacity(self.point_layers.len());
        let mut norm = Vec::with_capacity(self.point_layers.len());
        let mut activations = Vec::with_capacity(self.point_layers.len());
        let mut h = x;
        for (layer, bn) in self.point_layers.iter().zip(self.norms.iter_mut()) {
            let cache = layer.forward_cached(&h)?;
            let (mut y, bc) = if train {
                let (y, c) = bn.forward_train(cache.output())?;
                (y, Some(c))
            } else {
                (bn.forward_eval(cache.output())?, None)
            };
            y.mapv_inplace(|v| v.max(0.0));
            linear.push(cache);
            norm.push(bc);
            h = y.clone();
            activations.push(y);
        }
        let k = h.ncols();
        let mut pooled = Array2::zeros((clouds, k));
        let mut argmax = Array2::zeros((clouds, k));
        for c in 0..clouds {
            let block = h.slice(ndarray::s![c * n..(c + 1) * n, ..]);
            for j in 0..k {
                let (mut best, mut idx) = (f64::NEG_INFINITY, 0);
                for (i, &v) in block.column(j).iter().enumerate() {
                    if v > best {
                        best = v;
                        idx = i;
                    }
                }
                pooled[[c, j]] = best;
                argmax[[c, j]] = c * n + idx;
            }
        }
        Ok(PointPass {
            linear,
            norm,
            activations,
            argmax,
            pooled,
        })
    }

    fn head_input(pooled: &Array2<f64>, pairs: usize) -> Array2<f64> {
        let k = pooled.ncols();
        let mut z = Array2::zeros((pairs, 2 * k));
        for p in 0..pairs {
            z.slice_mut(ndarray::s![p, ..k]).assign(&pooled.row(p));
            z.slice_mut(ndarray::s![p, k..]).assign(&pooled.row(pairs + p));
        }
        z
    }

    /// Canonical-frame rotations for a batch of canonicalized pairs, using
    /// running normalization statistics.
    fn infer(&self, pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<(Vec<Matrix3<f64>>, Array2<f64>)> {
        let n = pairs[0].0.nrows();
        let x = stack_pairs(pairs)?;
        let mut probe = self.clone();
        let pass = probe.point_forward(x, n, false)?;
        let z = Self::head_input(&pass.pooled, pairs.len());
        let out = self.head.forward(&z)?;
        let rots = out.rows().into_iter().map(|r| gram_schmidt(r.as_slice().unwrap())).collect();
        Ok((rots, z))
    }

    /// Relative rotation `R̂` with `b ≈ R̂ a` and the latent code
    /// `[P_c(a), P_c(b)]`.
    pub fn estimate(&self, a: &PointCloud, b: &PointCloud) -> Result<(RotationMatrix, Vec<f64>)> {
        if a.len() != b.len() || a.len() < 4 {
            return Err(PoseError::InvalidInput("clouds must have equal size of at least 4".into()));
        }
        let (ca, cb, frame) = canonicalize(a, b);
        let (rots, z) = self.infer(&[(ca, cb)])?;
        let r = frame * rots[0] * frame.transpose();
        Ok((RotationMatrix::project(&r), z.row(0).to_vec()))
    }

    /// Mean geodesic loss over a batch and the gradients of every parameter
    /// group, in training mode.
    fn loss_and_step(&mut self, pairs: &[(Array2<f64>, Array2<f64>)], targets: &[Matrix3<f64>], opt: &mut EncoderOptimizer) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(pairs, targets)?;
        if !loss.is_finite() {
            return Err(PoseError::Divergence(format!("encoder loss {loss}")));
        }
        opt.apply(self, &grads)?;
        Ok(loss)
    }

    /// Mean geodesic loss in training mode with its parameter gradients.
    /// Updates the running normalization statistics.
    pub fn loss_and_gradients(
        &mut self,
        pairs: &[(Array2<f64>, Array2<f64>)],
        targets: &[Matrix3<f64>],
    ) -> Result<(f64, EncoderGradients)> {
        let b = pairs.len();
        let n = pairs[0].0.nrows();
        let x = stack_pairs(pairs)?;
        let pass = self.point_forward(x, n, true)?;
        let z = Self::head_input(&pass.pooled, b);
        let hc = self.head.forward_cached(&z)?;
        let out = hc.output();
        let mut d_out = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for i in 0..b {
            let o = out.row(i).to_vec();
            let r = gram_schmidt(&o);
            let (l, g) = geodesic_loss_gradient(&targets[i], &r);
            loss += l;
            let d = gram_schmidt_backward(&o, &(g / b as f64));
            for k in 0..6 {
                d_out[[i, k]] = d[k];
            }
        }
        loss /= b as f64;
        let head_grads = self.head.backward(&hc, &d_out)?;
        let dz = &head_grads.input;
        let k = pass.pooled.ncols();
        let mut d_act = Array2::zeros(pass.activations.last().unwrap().dim());
        for p in 0..b {
            for j in 0..k {
                d_act[[pass.argmax[[p, j]], j]] += dz[[p, j]];
                d_act[[pass.argmax[[b + p, j]], j]] += dz[[p, k + j]];
            }
        }
        let mut point = Vec::with_capacity(self.point_layers.len());
        let mut norm = Vec::with_capacity(self.point_layers.len());
        for l in (0..self.point_layers.len()).rev() {
            ndarray::Zip::from(&mut d_act)
                .and(&pass.activations[l])
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            let bc = pass.norm[l].as_ref().expect("training pass keeps normalization caches");
            let ng = self.norms[l].backward(bc, &d_act)?;
            let lg = self.point_layers[l].backward(&pass.linear[l], &ng.input)?;
            d_act = lg.input.clone();
            point.push(lg);
            norm.push((ng.gamma, ng.beta));
        }
        point.reverse();
        norm.reverse();
        Ok((
            loss,
            EncoderGradients {
                point,
                norm,
                head: head_grads,
            },
        ))
    }

    /// Every parameter slice in a fixed order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (l, bn) in self.point_layers.iter().zip(&self.norms) {
            out.extend(l.param_slices());
            out.push(bn.gamma.as_slice().unwrap());
            out.push(bn.beta.as_slice().unwrap());
        }
        out.extend(self.head.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (l, bn) in self.point_layers.iter_mut().zip(self.norms.iter_mut()) {
            out.extend(l.param_slices_mut());
            out.push(bn.gamma.as_slice_mut().unwrap());
            out.push(bn.beta.as_slice_mut().unwrap());
        }
        out.extend(self.head.param_slices_mut());
        out
    }

    pub fn round_to_f32(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for bn in &mut self.norms {
            bn.running_mean.mapv_inplace(|v| v as f32 as f64);
            bn.running_var.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.metadata.insert("kind".into(), "point-encoder".into());
        c.metadata.insert("point_layers".into(), self.point_layers.len().to_string());
        for (i, (l, bn)) in self.point_layers.iter().zip(&self.norms).enumerate() {
            c.push_net(&format!("point.{i}"), l);
            let w = bn.width();
            for (name, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("mean", &bn.running_mean),
                ("var", &bn.running_var),
            ] {
                c.push(NamedTensor::from_f64(format!("norm.{i}.{name}"), vec![w], v.as_slice().unwrap()));
            }
        }
        c.push_net("head", &self.head);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let layers: usize = c
            .metadata
            .get("point_layers")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PoseError::Checkpoint("missing `point_layers` metadata".into()))?;
        let mut point_layers = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for i in 0..layers {
            let l = c.net(&format!("point.{i}"))?;
            let w = l.output_width();
            let mut bn = BatchNorm::new(w);
            for (name, slot) in [
                ("gamma", &mut bn.gamma),
                ("beta", &mut bn.beta),
                ("mean", &mut bn.running_mean),
                ("var", &mut bn.running_var),
            ] {
                let t = c.get(&format!("norm.{i}.{name}"))?;
                if t.data.len() != w {
                    return Err(PoseError::Checkpoint(format!("norm.{i}.{name} has the wrong width")));
                }
                *slot = Array1::from_vec(t.to_f64());
            }
            point_layers.push(l);
            norms.push(bn);
        }
        let head = c.net("head")?;
        let net = Self {
            point_layers,
            norms,
            head,
        };
        if net.point_layers.first().map(|l| l.input_width()) != Some(6)
            || net.head.input_width() != 2 * net.latent_width()
            || net.head.output_width() != 6
        {
            return Err(PoseError::Checkpoint("encoder shapes are inconsistent".into()));
        }
        Ok(net)
    }
}

/// Parameter gradients of an [`EncoderNet`], in the layout of
/// [`EncoderNet::param_slices`].
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub point: Vec<crate::nn::Gradients>,
    pub norm: Vec<(Array1<f64>, Array1<f64>)>,
    pub head: crate::nn::Gradients,
}

impl EncoderGradients {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (l, (g, b)) in self.point.iter().zip(&self.norm) {
            out.extend(l.param_slices());
            out.push(g.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
        }
        out.extend(self.head.param_slices());
        out
    }
}

struct EncoderOptimizer {
    adam: Adam,
}

impl EncoderOptimizer {
    fn new(net: &EncoderNet, lr: f64) -> Self {
        let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self {
            adam: Adam::new(AdamConfig::with_lr(lr), &sizes),
        }
    }

    fn apply(&mut self, net: &mut EncoderNet, grads: &EncoderGradients) -> Result<()> {
        let g = grads.param_slices();
        self.adam.step(net.param_slices_mut(), &g)?;
        Ok(())
    }
}

fn stack_pairs(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<Array2<f64>> {
    if pairs.is_empty() {
        return Err(PoseError::InvalidInput("empty batch".into()));
    }
    let n = pairs[0].0.nrows();
    if pairs.iter().any(|(a, b)| a.nrows() != n || b.nrows() != n) {
        return Err(PoseError::InvalidInput("every cloud in a batch needs the same size".into()));
    }
    let views: Vec<_> = pairs.iter().map(|p| p.0.view()).chain(pairs.iter().map(|p| p.1.view())).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// One training example: a randomly posed noisy view and a second view
/// rotated by `R_p` with `angle(R_p) ≤ max_angle`.
pub fn training_pair(config: &EncoderConfig, rng: &mut impl Rng) -> Result<(PointCloud, PointCloud, Matrix3<f64>)> {
    let base = sample_surface_with(&config.shape, config.points, 0.0, rng)?;
    let posed = base.rotated(&uniform_rotation(rng));
    let r_p = bounded_rotation(rng, config.max_angle);
    let b = posed.rotated(&r_p).with_noise(config.noise, rng);
    let a = posed.with_noise(config.noise, rng);
    Ok((a, b, r_p))
}

fn canonical_batch(
    config: &EncoderConfig,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<(Array2<f64>, Array2<f64>)>, Vec<Matrix3<f64>>)> {
    let mut pairs = Vec::with_capacity(size);
    let mut targets = Vec::with_capacity(size);
    for _ in 0..size {
        let (a, b, r) = training_pair(config, rng)?;
        let (ca, cb, frame) = canonicalize(&a, &b);
        pairs.push((ca, cb));
        targets.push(frame.transpose() * r * frame);
    }
    Ok((pairs, targets))
}

/// Minimizes the mean geodesic loss over freshly generated pairs. Returns
/// the net (parameters rounded to `f32`) and the per-step loss curve.
pub fn train_encoder(config: &EncoderConfig, seed: u64) -> Result<(EncoderNet, Vec<f64>)> {
    let mut net = EncoderNet::new(config, seed)?;
    let mut opt = EncoderOptimizer::new(&net, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE4C0_DE5E);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (pairs, targets) = canonical_batch(config, config.batch_size, &mut rng)?;
        let loss = net
            .loss_and_step(&pairs, &targets, &mut opt)
            .map_err(|e| match e {
                PoseError::Divergence(m) => PoseError::Divergence(format!("step {step}: {m}")),
                other => other,
            })?;
        curve.push(loss);
    }
    net.round_to_f32();
    Ok((net, curve))
}

/// Mean geodesic error of the encoder and of the identity guess on
/// `pairs` held-out examples drawn with `seed`.
pub fn evaluate_encoder(net: &EncoderNet, config: &EncoderConfig, pairs: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0;
    let mut ident = 0.0;
    for _ in 0..pairs {
        let (a, b, r) = training_pair(config, &mut rng)?;
        let (est, _) = net.estimate(&a, &b)?;
        err += geodesic_loss(&r, est.matrix());
        ident += geodesic_loss(&r, &Matrix3::identity());
    }
    Ok((err / pairs as f64, ident / pairs as f64))
}
