//! Bias-free classification head with softmax and expectation decoding.
//!
//! Class `k` is scored as `<w_k, g>` for an age-feature vector `g`; the
//! predicted age is the expectation `sum_k k * p_k` of the softmax
//! distribution over the `K` classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{dot, softmax, Matrix, Mode};
use crate::metalearner::{generate_weights, MetaLearnerParams};

/// A per-person `K x D` classifier; row `i` is the class-`i` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedWeights(pub Matrix);

impl PersonalizedWeights {
    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeDistribution {
    pub probs: Vec<f64>,
    pub expected_age: f64,
}

impl AgeDistribution {
    /// Most likely class. Diagnostics only; metrics always use `expected_age`.
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &p)| if p > best.1 { (i, p) } else { best },
            )
            .0
    }
}

pub fn class_scores(weights: &PersonalizedWeights, age_features: &[f64]) -> Result<Vec<f64>> {
    if age_features.len() != weights.feature_dim() {
        return Err(Error::shape("class_scores", weights.feature_dim(), age_features.len()));
    }
    Ok(weights.0.iter_rows().map(|w| dot(w, age_features)).collect())
}

pub fn expected_value(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

pub fn age_distribution(scores: &[f64]) -> Result<AgeDistribution> {
    let probs = softmax(scores)?;
    let expected_age = expected_value(&probs).clamp(0.0, (scores.len() - 1) as f64);
    Ok(AgeDistribution { probs, expected_age })
}

/// Generates the personalized weights for `identity_features` (eval-mode
/// batch norm) and decodes the age distribution of `age_features`.
pub fn predict(params: &MetaLearnerParams, identity_features: &[f64], age_features: &[f64]) -> Result<AgeDistribution> {
    let weights = generate_weights(params, identity_features, Mode::Eval)?;
    age_distribution(&class_scores(&weights, age_features)?)
}
