use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` in place by the activation derivative, expressed in
    /// terms of the activation output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(output).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(output).for_each(|g, &a| *g *= 1.0 - a * a),
            Activation::Identity => {}
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One fully connected layer: `y = act(x Wᵀ + b)`, weight shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Activations recorded by [`DenseNet::forward_cached`]; `values[0]` is the
/// input and `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    values: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Flattened parameter gradients in the order of [`DenseNet::param_slices_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
        self.input *= factor;
    }

    /// Adds `other` into `self` (parameter gradients only).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o;
        }
    }
}

impl DenseNet {
    /// Builds a zero-initialized net with the given layer widths. Hidden
    /// layers use `hidden`, the last layer uses `output`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(widths.len() >= 2, "a net needs an input and an output width");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Layer::zeros(widths[i], widths[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    /// `n_layers` fully connected layers: input → hidden ×(n_layers−1) → output.
    pub fn mlp(
        input: usize,
        hidden: usize,
        n_layers: usize,
        output: usize,
        output_activation: Activation,
    ) -> Self {
        assert!(n_layers >= 1);
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(n_layers - 1));
        widths.push(output);
        Self::new(&widths, Activation::Relu, output_activation)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::Architecture("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(NnError::Architecture(format!(
                    "layer output {} does not feed input {}",
                    pair[0].output_width(),
                    pair[1].input_width()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_width() {
                return Err(NnError::Architecture("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output_width()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim() && a.activation == b.activation
            })
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_width() {
            return Err(NnError::Shape(format!(
                "input width {} but net expects {}",
                input.ncols(),
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            x = z;
        }
        Ok(x)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok(self.forward(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, input: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_owned());
        for layer in &self.layers {
            let mut z = values.last().unwrap().dot(&layer.weight.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            values.push(z);
        }
        Ok(ForwardCache { values })
    }

    /// Reverse-mode pass. `upstream` is ∂loss/∂output for every row; the
    /// returned parameter gradients are summed over rows.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        if cache.values.len() != self.layers.len() + 1 {
            return Err(NnError::Shape("cache does not belong to this net".into()));
        }
        if upstream.dim() != cache.output().dim() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} but output {:?}",
                upstream.dim(),
                cache.output().dim()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.values[i + 1], &mut delta);
            let gw = delta.t().dot(&cache.values[i]);
            weights.push(if gw.is_standard_layout() { gw } else { gw.as_standard_layout().into_owned() });
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }

    /// Gradient of `Σ_rows upstream · output` with respect to the input only.
    pub fn input_gradient(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        if upstream.dim() != cache.output().dim() {
            return Err(NnError::Shape("upstream gradient does not match output".into()));
        }
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.values[i + 1], &mut delta);
            delta = delta.dot(&layer.weight);
        }
        Ok(delta)
    }

    /// Orthogonal weights (every singular value 1 before scaling by `gain`),
    /// zero biases. Deterministic for a given seed.
    pub fn orthogonal_init(&mut self, seed: u64, gain: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let (rows, cols) = layer.weight.dim();
            let q = orthogonal_matrix(rows, cols, &mut rng);
            for r in 0..rows {
                for c in 0..cols {
                    layer.weight[[r, c]] = gain * q[(r, c)];
                }
            }
            layer.bias.fill(0.0);
        }
    }

    pub fn orthogonal(mut self, seed: u64) -> Self {
        self.orthogonal_init(seed, 1.0);
        self
    }

    /// Parameter slices in a fixed order: weight₀, bias₀, weight₁, …
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32` so the net survives an
    /// `f32` checkpoint unchanged.
    pub fn round_to_f32(&mut self) {
        for s in self.param_slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Largest absolute parameter difference to `other`.
    pub fn max_abs_diff(&self, other: &DenseNet) -> f64 {
        self.param_slices()
            .iter()
            .zip(other.param_slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the parameter difference to `other`.
    pub fn param_distance(&self, other: &DenseNet) -> f64 {
        self.param_slices()
            .iter()
            .zip(other.param_slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // QR of a tall Gaussian matrix; wide matrices use the transpose.
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if tall {
        q
    } else {
        q.transpose()
    }
}

/// Soft target update: `target ← rate·target + (1 − rate)·online`.
/// `rate` close to 1 gives slow tracking.
pub fn polyak_update(target: &mut DenseNet, online: &DenseNet, rate: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(NnError::Architecture("target and online nets differ".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(NnError::Architecture(format!("polyak rate {rate} outside [0, 1]")));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|a, &b| *a = rate * *a + (1.0 - rate) * b);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|a, &b| *a = rate * *a + (1.0 - rate) * b);
    }
    Ok(())
}
