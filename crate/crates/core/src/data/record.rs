use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample. `label` is on the class-index scale `0..=K-1` and may be
/// fractional (apparent-age means).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub label: f64,
    /// Annotation standard deviation, when known.
    pub sigma: Option<f64>,
    /// Diagnostics only; never an input to training.
    pub identity_id: Option<u32>,
    pub id_feat: Vec<f64>,
    pub age_feat: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub age_dim: usize,
    pub identity_dim: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dims: DataDims,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(dims: DataDims, records: Vec<FeatureRecord>) -> Result<Self> {
        if dims.classes == 0 {
            return Err(Error::invalid("dataset needs K >= 1"));
        }
        for (i, r) in records.iter().enumerate() {
            validate_record(&dims, r).map_err(|e| Error::invalid(format!("record {i}: {e}")))?;
        }
        Ok(Self { dims, records })
    }

    pub fn dims(&self) -> DataDims {
        self.dims
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, i: usize) -> &FeatureRecord {
        &self.records[i]
    }

    /// A new dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dims: self.dims,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// All sigmas, or `None` if any record lacks one.
    pub fn sigmas(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.sigma).collect()
    }
}

fn validate_record(dims: &DataDims, r: &FeatureRecord) -> std::result::Result<(), String> {
    if r.age_feat.len() != dims.age_dim {
        return Err(format!(
            "age_feat has {} entries, expected {}",
            r.age_feat.len(),
            dims.age_dim
        ));
    }
    if r.id_feat.len() != dims.identity_dim {
        return Err(format!(
            "id_feat has {} entries, expected {}",
            r.id_feat.len(),
            dims.identity_dim
        ));
    }
    let k_max = (dims.classes - 1) as f64;
    if !(r.label >= 0.0 && r.label <= k_max) {
        return Err(format!("label {} outside [0, {k_max}]", r.label));
    }
    if let Some(s) = r.sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(format!("sigma {s} must be > 0"));
        }
    }
    if r.age_feat.iter().chain(&r.id_feat).any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(())
}
