//! Age-estimation metrics (MAE, cumulative score, ε-error) and weight-space
//! retrieval.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::Mode;
use crate::metalearner::{generate_weights, MetaLearnerParams};

/// Default upper end of the CS curve, in years.
pub const DEFAULT_THETA_MAX: u32 = 10;

fn check_pairs(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("metrics", preds.len(), labels.len()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let total: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// Percentage of samples whose absolute error is at most `theta`.
pub fn cs(preds: &[f64], labels: &[f64], theta: f64) -> Result<f64> {
    check_pairs(preds, labels)?;
    if !(theta >= 0.0) {
        return Err(Error::invalid(format!("CS threshold must be >= 0, got {theta}")));
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| (*p - *y).abs() <= theta)
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// `(theta, CS(theta))` for integer `theta` in `0..=theta_max`.
pub fn cs_curve(preds: &[f64], labels: &[f64], theta_max: u32) -> Result<Vec<(u32, f64)>> {
    check_pairs(preds, labels)?;
    let mut errs: Vec<f64> = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).collect();
    errs.sort_by(f64::total_cmp);
    let m = errs.len() as f64;
    Ok((0..=theta_max)
        .map(|t| {
            let hits = errs.partition_point(|&e| e <= t as f64);
            (t, 100.0 * hits as f64 / m)
        })
        .collect())
}

/// `1 - mean(exp(-(ŷ - y)² / 2σ²))`.
pub fn eps_error(preds: &[f64], labels: &[f64], sigmas: &[f64]) -> Result<f64> {
    check_pairs(preds, labels)?;
    if sigmas.len() != preds.len() {
        return Err(Error::shape("eps_error sigmas", preds.len(), sigmas.len()));
    }
    if let Some((i, s)) = sigmas.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!(
            "sigma[{i}] = {s}; ε-error needs every sigma > 0"
        )));
    }
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .zip(sigmas)
        .map(|((p, y), s)| (-(p - y).powi(2) / (2.0 * s * s)).exp())
        .sum();
    Ok(1.0 - sum / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub cs_curve: Vec<(u32, f64)>,
    pub eps_error: Option<f64>,
    pub n_samples: usize,
}

impl EvalResult {
    /// `sigmas` is `None` when any sample lacks an annotation deviation.
    pub fn compute(preds: &[f64], labels: &[f64], sigmas: Option<&[f64]>, theta_max: u32) -> Result<Self> {
        Ok(Self {
            mae: mae(preds, labels)?,
            cs_curve: cs_curve(preds, labels, theta_max)?,
            eps_error: sigmas.map(|s| eps_error(preds, labels, s)).transpose()?,
            n_samples: preds.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("EvalResult JSON: {e}")))
    }

    pub fn write_cs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "theta,cs")?;
        for (t, c) in &self.cs_curve {
            writeln!(w, "{t},{c}")?;
        }
        Ok(())
    }
}

/// Row-major flattening of the eval-mode personalized weights.
pub fn weight_embedding(params: &MetaLearnerParams, identity_features: &[f64]) -> Result<Vec<f64>> {
    Ok(generate_weights(params, identity_features, Mode::Eval)?.0.into_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Gallery position of the query when it was drawn from the gallery.
    pub query_index: Option<usize>,
    /// Gallery indices, nearest first.
    pub ranked_indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl RetrievalResult {
    /// The first and last `percent`% of the ranking (at least one item each).
    pub fn top_bottom(&self, percent: f64) -> (&[usize], &[usize]) {
        let n = self.ranked_indices.len();
        let take = ((percent / 100.0 * n as f64).ceil() as usize).clamp(1, n.max(1)).min(n);
        (&self.ranked_indices[..take], &self.ranked_indices[n - take..])
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ranks the gallery by Euclidean distance to `query`; ties keep gallery order.
pub fn retrieve<V: AsRef<[f64]>>(query: &[f64], gallery: &[V]) -> Result<RetrievalResult> {
    rank(query, gallery, None)
}

/// Uses gallery item `query_index` as the query and ranks all other items.
pub fn retrieve_from_gallery<V: AsRef<[f64]>>(gallery: &[V], query_index: usize) -> Result<RetrievalResult> {
    let query = gallery.get(query_index).ok_or_else(|| {
        Error::invalid(format!(
            "query index {query_index} outside gallery of {}",
            gallery.len()
        ))
    })?;
    rank(query.as_ref(), gallery, Some(query_index))
}

fn rank<V: AsRef<[f64]>>(query: &[f64], gallery: &[V], exclude: Option<usize>) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::invalid("retrieval gallery is empty"));
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        let g = g.as_ref();
        if g.len() != query.len() {
            return Err(Error::shape("retrieve", query.len(), g.len()));
        }
        if Some(i) == exclude {
            continue;
        }
        scored.push((i, euclidean(query, g)));
    }
    // stable sort keeps ascending index order among equal distances
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(RetrievalResult {
        query_index: exclude,
        ranked_indices: scored.iter().map(|s| s.0).collect(),
        distances: scored.iter().map(|s| s.1).collect(),
    })
}

/// Fraction of the top and bottom `percent`% items for which `same(index)` holds.
pub fn slice_agreement(result: &RetrievalResult, percent: f64, same: impl Fn(usize) -> bool) -> (f64, f64) {
    let (top, bottom) = result.top_bottom(percent);
    let rate = |s: &[usize]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().filter(|&&i| same(i)).count() as f64 / s.len() as f64
        }
    };
    (rate(top), rate(bottom))
}
