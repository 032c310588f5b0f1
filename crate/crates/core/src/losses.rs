//! Training objective on class scores: cross-entropy, ordinal hinge loss and
//! their weighted sum, each returning the gradient w.r.t. the scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::layers::{log_softmax, softmax_unchecked};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    HardOnehot,
    LabelDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub delta: f64,
    pub target_mode: TargetMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            delta: 2.0,
            target_mode: TargetMode::HardOnehot,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::invalid(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Classification target: a class index or a probability vector.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Distribution(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("class scores".into()));
    }
    Ok(())
}

/// Cross-entropy of `softmax(scores)` against the target; gradient `p - t`.
pub fn cls_loss(scores: &[f64], target: Target<'_>) -> Result<LossGrad> {
    check_finite(scores)?;
    let k = scores.len();
    let log_p = log_softmax(scores);
    let mut grad = softmax_unchecked(scores);
    let loss = match target {
        Target::Class(y) => {
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range 0..{k}")));
            }
            grad[y] -= 1.0;
            -log_p[y]
        }
        Target::Distribution(t) => {
            if t.len() != k {
                return Err(Error::shape("cls_loss target", k, t.len()));
            }
            let sum: f64 = t.iter().sum();
            if t.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "soft target must be non-negative and sum to 1, sums to {sum}"
                )));
            }
            let mut loss = 0.0;
            for ((g, tk), lp) in grad.iter_mut().zip(t).zip(&log_p) {
                *g -= tk;
                if *tk > 0.0 {
                    loss -= tk * lp;
                }
            }
            loss
        }
    };
    Ok(LossGrad { loss, grad })
}

/// `max(0, delta - (z - z'))`
#[inline]
pub fn hinge(z: f64, z_prime: f64, delta: f64) -> f64 {
    (delta - (z - z_prime)).max(0.0)
}

/// Ordinal hinge loss: scores rise by at least `delta` per class up to `y`
/// and fall by at least `delta` per class after it.
pub fn ord_loss(scores: &[f64], y: usize, delta: f64) -> Result<LossGrad> {
    check_finite(scores)?;
    let k = scores.len();
    if y >= k {
        return Err(Error::invalid(format!("label {y} out of range 0..{k}")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; k];
    // H(s_{k+1}, s_k) for k < y; H(s_k, s_{k+1}) for k >= y.
    for j in 0..k - 1 {
        let (hi, lo) = if j < y { (j + 1, j) } else { (j, j + 1) };
        let slack = delta - (scores[hi] - scores[lo]);
        if slack > 0.0 {
            loss += slack;
            grad[hi] -= 1.0;
            grad[lo] += 1.0;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// `L^cls + lambda * L^ord`. The ordinal term always uses the hard label.
pub fn total_loss(scores: &[f64], target: Target<'_>, y_hard: usize, config: &LossConfig) -> Result<LossGrad> {
    let mut cls = cls_loss(scores, target)?;
    if config.lambda == 0.0 {
        return Ok(cls);
    }
    let ord = ord_loss(scores, y_hard, config.delta)?;
    cls.loss += config.lambda * ord.loss;
    for (g, o) in cls.grad.iter_mut().zip(&ord.grad) {
        *g += config.lambda * o;
    }
    Ok(cls)
}

/// Discretized Gaussian over classes `0..K` centred at `mean`.
pub fn encode_label_distribution(mean: f64, sigma: f64, classes: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "label-distribution sigma must be > 0, got {sigma}"
        )));
    }
    if classes == 0 || !mean.is_finite() {
        return Err(Error::invalid("label distribution needs K >= 1 and a finite mean"));
    }
    // log-space then shift, so a tiny sigma does not underflow every class.
    let logits: Vec<f64> = (0..classes)
        .map(|k| -((k as f64 - mean).powi(2)) / (2.0 * sigma * sigma))
        .collect();
    Ok(softmax_unchecked(&logits))
}

/// Hard label used by the ordinal term: `round(label)` clamped into range.
pub fn hard_label(label: f64, classes: usize) -> usize {
    (label.round().max(0.0) as usize).min(classes - 1)
}
