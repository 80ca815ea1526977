use ndarray::{Array1, Array2, Axis};

use super::{NnError, Result};

/// Per-feature normalization over the rows of a batch, with running
/// statistics for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub input: Array2<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.width() {
            return Err(NnError::Shape(format!(
                "batch norm width {} but input has {} columns",
                self.width(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, BatchNormCache)> {
        self.check(x)?;
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = &centered * &inv_std;
        let out = &normalized * &self.gamma + &self.beta;
        let m = self.momentum;
        let unbiased = if x.nrows() > 1 { &var * (n / (n - 1.0)) } else { var.clone() };
        self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &unbiased * m;
        Ok((out, BatchNormCache { normalized, inv_std }))
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        Ok((x - &self.running_mean) * &inv_std * &self.gamma + &self.beta)
    }

    pub fn backward(&self, cache: &BatchNormCache, upstream: &Array2<f64>) -> Result<BatchNormGrads> {
        if upstream.dim() != cache.normalized.dim() {
            return Err(NnError::Shape("upstream does not match batch norm cache".into()));
        }
        let n = upstream.nrows() as f64;
        let gamma_grad = (upstream * &cache.normalized).sum_axis(Axis(0));
        let beta_grad = upstream.sum_axis(Axis(0));
        let dxhat = upstream * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.normalized).sum_axis(Axis(0));
        let input = (&dxhat * n - &sum_dxhat - &cache.normalized * &sum_dxhat_xhat) * &cache.inv_std / n;
        Ok(BatchNormGrads {
            gamma: gamma_grad,
            beta: beta_grad,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((64, 3), |(_, c)| rng.gen_range(-1.0..1.0) * (c + 1) as f64 + 5.0);
        let mut bn = BatchNorm::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        for col in y.columns() {
            assert!(col.mean().unwrap().abs() < 1e-12);
            let var = col.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-2.0..2.0));
        let up = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-1.0..1.0));
        let mut bn = BatchNorm::new(4);
        bn.gamma = Array1::from_vec(vec![0.5, 1.5, -1.0, 2.0]);
        let loss = |x: &Array2<f64>| {
            let mut b = bn.clone();
            (b.forward_train(x).unwrap().0 * &up).sum()
        };
        let (_, cache) = bn.clone().forward_train(&x).unwrap();
        let g = bn.backward(&cache, &up).unwrap();
        let h = 1e-5;
        for r in 0..7 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                let a = g.input[[r, c]];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4, "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = Array1::from_vec(vec![1.0, -1.0]);
        bn.running_var = Array1::from_vec(vec![4.0, 1.0]);
        bn.eps = 0.0;
        let y = bn.forward_eval(&ndarray::array![[3.0, 0.0]]).unwrap();
        assert_eq!(y, ndarray::array![[1.0, 1.0]]);
    }
}
