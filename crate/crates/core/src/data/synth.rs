//! Synthetic personalized-aging benchmark.
//!
//! Every identity `j` has a latent vector `a_j ~ N(0, I_A)`. Its identity
//! features are `tanh(U a_j)` plus noise, and it ages with a personal offset
//! `o_j = clamp(c · a_j, ±offset_max)`: a sample of true age `y` looks like
//! age `z = clamp(y + o_j, 0, K-1)`. Age features are Gaussian bumps of `z`
//! over `D` evenly spaced centres plus noise.
//!
//! An identity-blind predictor can at best recover `z`, so its error is about
//! `E|o_j|`; a predictor that can infer `o_j` from the identity features can
//! remove it. [`compute_oracle`] measures both by decoding `z` directly from
//! the age features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::record::{DataDims, Dataset, FeatureRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub classes: usize,
    pub age_dim: usize,
    pub identity_dim: usize,
    pub latent_dim: usize,
    /// Largest personal offset, in years.
    pub offset_max: f64,
    pub feature_noise: f64,
    /// Width `τ` of the age-feature bumps.
    pub rbf_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 200,
            samples_per_identity: 10,
            classes: 101,
            age_dim: 64,
            identity_dim: 32,
            latent_dim: 4,
            offset_max: 5.0,
            feature_noise: 0.01,
            rbf_width: 3.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_identities", self.n_identities),
            ("samples_per_identity", self.samples_per_identity),
            ("classes", self.classes),
            ("age_dim", self.age_dim),
            ("identity_dim", self.identity_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("synth `{name}` must be at least 1")));
            }
        }
        if self.n_identities > u32::MAX as usize - 1 {
            return Err(Error::invalid("too many identities for u32 ids"));
        }
        if !(self.offset_max >= 0.0 && self.offset_max < self.classes as f64 / 4.0) {
            return Err(Error::invalid(format!(
                "offset_max must be in [0, K/4) = [0, {}), got {}",
                self.classes as f64 / 4.0,
                self.offset_max
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::invalid(format!(
                "feature_noise must be >= 0, got {}",
                self.feature_noise
            )));
        }
        if !(self.rbf_width > 0.0 && self.rbf_width.is_finite()) {
            return Err(Error::invalid(format!("rbf_width must be > 0, got {}", self.rbf_width)));
        }
        Ok(())
    }

    pub fn data_dims(&self) -> DataDims {
        DataDims {
            age_dim: self.age_dim,
            identity_dim: self.identity_dim,
            classes: self.classes,
        }
    }

    /// Bump centres, evenly spaced on `[0, K-1]`.
    pub fn centers(&self) -> Vec<f64> {
        let k_max = (self.classes - 1) as f64;
        if self.age_dim == 1 {
            return vec![k_max / 2.0];
        }
        let step = k_max / (self.age_dim - 1) as f64;
        (0..self.age_dim).map(|d| d as f64 * step).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    /// True offset `o_j` per identity id.
    pub offsets: Vec<f64>,
    /// MAE of the best identity-blind predictor (predicts the decoded `z`).
    pub bayes_mae_global: f64,
    /// MAE when the identity offset is known (predicts decoded `z - o_j`).
    pub bayes_mae_personal: f64,
}

impl SynthOracle {
    pub fn offset_of(&self, record: &FeatureRecord) -> Option<f64> {
        record.identity_id.and_then(|id| self.offsets.get(id as usize).copied())
    }
}

/// Noise-free age features of apparent age `z`.
pub fn age_features(z: f64, config: &SynthConfig) -> Vec<f64> {
    let two_tau2 = 2.0 * config.rbf_width * config.rbf_width;
    config
        .centers()
        .iter()
        .map(|mu| (-(z - mu).powi(2) / two_tau2).exp())
        .collect()
}

/// Recovers `z` from age features by fitting a parabola to the log of the
/// three bumps around the strongest one. Exact for noise-free features.
pub fn decode_signal(age_feat: &[f64], config: &SynthConfig) -> f64 {
    let centers = config.centers();
    let k_max = (config.classes - 1) as f64;
    let peak = age_feat
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0;
    if centers.len() < 3 {
        return centers[peak].clamp(0.0, k_max);
    }
    let mid = peak.clamp(1, centers.len() - 2);
    let l = |i: usize| age_feat[i].max(1e-300).ln();
    let (l0, l1, l2) = (l(mid - 1), l(mid), l(mid + 1));
    let curvature = l0 - 2.0 * l1 + l2;
    let step = centers[1] - centers[0];
    let z = if curvature < 0.0 {
        centers[mid] + step * (l0 - l2) / (2.0 * curvature)
    } else {
        centers[peak]
    };
    z.clamp(0.0, k_max)
}

fn to_f32_precision(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Generates the dataset and its oracle. Every stored value is rounded to
/// `f32` precision, so the dataset survives a MAFV1 round trip unchanged.
pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, SynthOracle)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let a_dim = config.latent_dim;
    let k_max = (config.classes - 1) as f64;

    let u_scale = 1.0 / (a_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..config.identity_dim * a_dim)
        .map(|_| u_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut direction: Vec<f64> = (0..a_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    // std(c · a) = |c| for a ~ N(0, I)
    let target = config.offset_max / 2.0;
    direction
        .iter_mut()
        .for_each(|v| *v *= if norm > 0.0 { target / norm } else { 0.0 });

    let noise = Normal::new(0.0, config.feature_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut offsets = Vec::with_capacity(config.n_identities);
    let mut records = Vec::with_capacity(config.n_identities * config.samples_per_identity);
    for j in 0..config.n_identities {
        let latent: Vec<f64> = (0..a_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let raw: f64 = direction.iter().zip(&latent).map(|(c, a)| c * a).sum();
        let offset = to_f32_precision(raw.clamp(-config.offset_max, config.offset_max));
        offsets.push(offset);
        let clean_id: Vec<f64> = (0..config.identity_dim)
            .map(|f| {
                let row = &mixing[f * a_dim..(f + 1) * a_dim];
                row.iter().zip(&latent).map(|(u, a)| u * a).sum::<f64>().tanh()
            })
            .collect();
        for _ in 0..config.samples_per_identity {
            let y = rng.random_range(0..config.classes) as f64;
            let z = (y + offset).clamp(0.0, k_max);
            let age_feat = age_features(z, config)
                .into_iter()
                .map(|g| to_f32_precision(g + noise.sample(&mut rng)))
                .collect();
            let id_feat = clean_id
                .iter()
                .map(|h| to_f32_precision(h + noise.sample(&mut rng)))
                .collect();
            records.push(FeatureRecord {
                label: y,
                sigma: Some(to_f32_precision(1.0 + offset.abs() / 2.0)),
                identity_id: Some(j as u32),
                id_feat,
                age_feat,
            });
        }
    }
    let dataset = Dataset::new(config.data_dims(), records)?;
    let oracle = compute_oracle(&dataset, &offsets, config)?;
    Ok((dataset, oracle))
}

/// Oracle MAEs over `dataset`, whose records must carry identity ids that
/// index into `offsets`.
pub fn compute_oracle(dataset: &Dataset, offsets: &[f64], config: &SynthConfig) -> Result<SynthOracle> {
    if dataset.is_empty() {
        return Err(Error::invalid("oracle of an empty dataset"));
    }
    let k_max = (config.classes - 1) as f64;
    let mut global = 0.0;
    let mut personal = 0.0;
    for (i, r) in dataset.records().iter().enumerate() {
        let offset = r
            .identity_id
            .and_then(|id| offsets.get(id as usize))
            .ok_or_else(|| Error::invalid(format!("record {i}: no latent offset for identity {:?}", r.identity_id)))?;
        let z_hat = decode_signal(&r.age_feat, config);
        global += (z_hat - r.label).abs();
        personal += ((z_hat - offset).clamp(0.0, k_max) - r.label).abs();
    }
    let n = dataset.len() as f64;
    Ok(SynthOracle {
        offsets: offsets.to_vec(),
        bayes_mae_global: global / n,
        bayes_mae_personal: personal / n,
    })
}
