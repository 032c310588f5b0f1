//! Layer forward/backward passes with hand-derived gradients.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{axpy, Matrix};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch normalization uses batch statistics (and updates its
/// running averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot-uniform matrix of shape `rows x cols`, limit `sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// `y = W x + b` applied row-wise to a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            grad_weight: Matrix::zeros(output, input),
            grad_bias: vec![0.0; output],
        }
    }

    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input, output);
        layer.weight = glorot_uniform(output, input, rng);
        layer
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("AffineLayer::from_parts", weight.rows(), bias.len()));
        }
        let (out, inp) = weight.shape();
        Ok(Self {
            weight,
            bias,
            grad_weight: Matrix::zeros(out, inp),
            grad_bias: vec![0.0; out],
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("affine_forward", self.input_dim(), x.cols()));
        }
        let mut out = x.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, grad_out: &Matrix, cached_x: &Matrix) -> Result<Matrix> {
        if grad_out.cols() != self.output_dim() || cached_x.cols() != self.input_dim() {
            return Err(Error::shape(
                "affine_backward",
                format!("grad_out.cols={} x.cols={}", self.output_dim(), self.input_dim()),
                format!("grad_out.cols={} x.cols={}", grad_out.cols(), cached_x.cols()),
            ));
        }
        if grad_out.rows() != cached_x.rows() {
            return Err(Error::shape("affine_backward batch", cached_x.rows(), grad_out.rows()));
        }
        let gw = grad_out.transposed_matmul(cached_x)?;
        self.grad_weight.add_assign(&gw)?;
        for row in grad_out.iter_rows() {
            axpy(1.0, row, &mut self.grad_bias);
        }
        grad_out.matmul(&self.weight)
    }
}

pub fn affine_forward(x: &Matrix, layer: &AffineLayer) -> Result<Matrix> {
    layer.forward(x)
}

pub fn affine_backward(grad_out: &Matrix, cached_x: &Matrix, layer: &mut AffineLayer) -> Result<Matrix> {
    layer.backward(grad_out, cached_x)
}

/// Intermediate values from a train-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub x_hat: Matrix,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) batch variance.
    pub batch_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    #[serde(skip)]
    last_cache: Option<BatchNormCacheSlot>,
}

// Wrapper so the stored cache does not take part in equality.
#[derive(Clone, Debug)]
struct BatchNormCacheSlot(BatchNormCache);

impl PartialEq for BatchNormCacheSlot {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            grad_gamma: vec![0.0; width],
            grad_beta: vec![0.0; width],
            last_cache: None,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|g| *g = 0.0);
        self.grad_beta.iter_mut().for_each(|g| *g = 0.0);
    }

    fn check_width(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.width() {
            return Err(Error::shape(op, self.width(), x.cols()));
        }
        Ok(())
    }

    /// Normalizes with batch statistics without touching the running averages.
    pub fn forward_train(&self, x: &Matrix) -> Result<(Matrix, BatchNormCache)> {
        self.check_width("batchnorm_forward", x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::invalid(format!(
                "train-mode batch normalization needs at least 2 rows, got {n}"
            )));
        }
        let w = self.width();
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; w];
        for row in x.iter_rows() {
            axpy(inv_n, row, &mut mean);
        }
        let mut var = vec![0.0; w];
        for row in x.iter_rows() {
            for ((v, xi), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = xi - m;
                *v += d * d * inv_n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut x_hat = Matrix::zeros(n, w);
        let mut out = Matrix::zeros(n, w);
        for r in 0..n {
            let xr = x.row(r);
            let hr = x_hat.row_mut(r);
            for c in 0..w {
                hr[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let hr = x_hat.row(r).to_vec();
            let or = out.row_mut(r);
            for c in 0..w {
                or[c] = self.gamma[c] * hr[c] + self.beta[c];
            }
        }
        Ok((
            out,
            BatchNormCache {
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Folds batch statistics into the running averages; the running variance
    /// uses the unbiased `n / (n - 1)` correction.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let n = cache.x_hat.rows() as f64;
        let correction = n / (n - 1.0);
        let m = self.momentum;
        for c in 0..self.width() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.batch_var[c] * correction;
        }
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width("batchnorm_forward", x)?;
        let w = self.width();
        let scale: Vec<f64> = (0..w)
            .map(|c| self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt())
            .collect();
        let mut out = Matrix::zeros(x.rows(), w);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for c in 0..w {
                or[c] = (xr[c] - self.running_mean[c]) * scale[c] + self.beta[c];
            }
        }
        Ok(out)
    }

    /// Stateful forward: train mode updates running statistics and keeps the
    /// cache for a later [`BatchNormLayer::backward`].
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        match mode {
            Mode::Train => {
                let (out, cache) = self.forward_train(x)?;
                self.update_running(&cache);
                self.last_cache = Some(BatchNormCacheSlot(cache));
                Ok(out)
            }
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Backward through the most recent train-mode [`BatchNormLayer::forward`].
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .last_cache
            .take()
            .ok_or(Error::MissingCache("batchnorm_backward"))?
            .0;
        let grad = self.backward_with(grad_out, &cache);
        self.last_cache = Some(BatchNormCacheSlot(cache));
        grad
    }

    /// Accumulates `dL/dgamma`, `dL/dbeta` and returns `dL/dx` for a train-mode pass.
    pub fn backward_with(&mut self, grad_out: &Matrix, cache: &BatchNormCache) -> Result<Matrix> {
        if grad_out.shape() != cache.x_hat.shape() {
            return Err(Error::shape(
                "batchnorm_backward",
                format!("{:?}", cache.x_hat.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let (n, w) = grad_out.shape();
        let mut sum_dy = vec![0.0; w];
        let mut sum_dy_xhat = vec![0.0; w];
        for r in 0..n {
            let dy = grad_out.row(r);
            let xh = cache.x_hat.row(r);
            for c in 0..w {
                sum_dy[c] += dy[c];
                sum_dy_xhat[c] += dy[c] * xh[c];
            }
        }
        for c in 0..w {
            self.grad_beta[c] += sum_dy[c];
            self.grad_gamma[c] += sum_dy_xhat[c];
        }
        // dx = gamma * inv_std / n * (n dy - sum(dy) - x_hat * sum(dy * x_hat))
        let nf = n as f64;
        let mut grad_x = Matrix::zeros(n, w);
        for r in 0..n {
            let dy = grad_out.row(r);
            let xh = cache.x_hat.row(r);
            let gx = grad_x.row_mut(r);
            for c in 0..w {
                let k = self.gamma[c] * cache.inv_std[c] / nf;
                gx[c] = k * (nf * dy[c] - sum_dy[c] - xh[c] * sum_dy_xhat[c]);
            }
        }
        Ok(grad_x)
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes gradient where the cached input is strictly positive.
pub fn relu_backward(grad_out: &Matrix, cached_x: &Matrix) -> Result<Matrix> {
    if grad_out.shape() != cached_x.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", cached_x.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut g = grad_out.clone();
    for (gi, xi) in g.as_mut_slice().iter_mut().zip(cached_x.as_slice()) {
        if *xi <= 0.0 {
            *gi = 0.0;
        }
    }
    Ok(g)
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores".into()));
    }
    Ok(softmax_unchecked(scores))
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// `log softmax`, stable for large score margins.
pub(crate) fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - lse).collect()
}
