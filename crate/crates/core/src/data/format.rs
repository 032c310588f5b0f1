//! MAFV1 binary feature files.
//!
//! ```text
//! 0..4    b"MAFV"
//! 4       version u8 = 1
//! 5..21   u32 LE: N, D, F, K
//! then N records:
//!         f32 label
//!         f32 sigma            (NaN = absent)
//!         u32 identity_id      (0xFFFFFFFF = absent)
//!         D x f32 age features
//!         F x f32 identity features
//! ```
//!
//! All values are little-endian. Reals are stored as `f32` and widened to
//! `f64` on load.

use std::fs;
use std::path::Path;

use super::record::{DataDims, Dataset, FeatureRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAFV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
const ABSENT_ID: u32 = u32::MAX;

pub fn record_len(dims: &DataDims) -> usize {
    12 + 4 * (dims.age_dim + dims.identity_dim)
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let dims = dataset.dims();
    let n = dataset.len();
    for (name, v) in [
        ("N", n),
        ("D", dims.age_dim),
        ("F", dims.identity_dim),
        ("K", dims.classes),
    ] {
        if v > u32::MAX as usize {
            return Err(Error::invalid(format!("{name} = {v} does not fit in u32")));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * record_len(&dims));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [n, dims.age_dim, dims.identity_dim, dims.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for r in dataset.records() {
        out.extend_from_slice(&(r.label as f32).to_le_bytes());
        out.extend_from_slice(&r.sigma.map_or(f32::NAN, |s| s as f32).to_le_bytes());
        let id = match r.identity_id {
            Some(ABSENT_ID) => {
                return Err(Error::invalid("identity_id 0xFFFFFFFF is reserved for 'absent'"));
            }
            Some(id) => id,
            None => ABSENT_ID,
        };
        out.extend_from_slice(&id.to_le_bytes());
        for v in r.age_feat.iter().chain(&r.id_feat) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take4(&mut self) -> [u8; 4] {
        let b = self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes");
        self.pos += 4;
        b
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take4())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take4())
    }

    fn finite(&mut self, what: &str) -> Result<f64> {
        let at = self.pos as u64;
        let v = self.f32();
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite {what}: {v}")));
        }
        Ok(f64::from(v))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::format(0, format!("bad magic {got:?}, expected \"MAFV\"")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated header: expected {HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {}, expected {VERSION}", bytes[4]),
        ));
    }
    let mut cur = Cursor { bytes, pos: 5 };
    let n = cur.u32() as usize;
    let dims = DataDims {
        age_dim: cur.u32() as usize,
        identity_dim: cur.u32() as usize,
        classes: cur.u32() as usize,
    };
    if dims.classes == 0 {
        return Err(Error::format(17, "K must be at least 1"));
    }
    let rec_len = record_len(&dims);
    let expected = n
        .checked_mul(rec_len)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(5, "header sizes overflow"))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / rec_len;
        return Err(Error::format(
            (HEADER_LEN + complete * rec_len) as u64,
            format!(
                "truncated: header declares {n} records ({expected} bytes), file has {} bytes; record {complete} is incomplete",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after {n} records", bytes.len() - expected),
        ));
    }

    let k_max = (dims.classes - 1) as f64;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let at = cur.pos as u64;
        let label = cur.finite("label")?;
        if !(0.0..=k_max).contains(&label) {
            return Err(Error::format(
                at,
                format!("record {i}: label {label} outside [0, {k_max}]"),
            ));
        }
        let sigma_at = cur.pos as u64;
        let sigma = cur.f32();
        let sigma = if sigma.is_nan() {
            None
        } else if sigma > 0.0 && sigma.is_finite() {
            Some(f64::from(sigma))
        } else {
            return Err(Error::format(
                sigma_at,
                format!("record {i}: sigma {sigma} must be > 0 or NaN"),
            ));
        };
        let identity_id = match cur.u32() {
            ABSENT_ID => None,
            id => Some(id),
        };
        let age_feat = (0..dims.age_dim)
            .map(|_| cur.finite("age feature"))
            .collect::<Result<Vec<_>>>()?;
        let id_feat = (0..dims.identity_dim)
            .map(|_| cur.finite("identity feature"))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord {
            label,
            sigma,
            identity_id,
            id_feat,
            age_feat,
        });
    }
    Dataset::new(dims, records)
}

pub fn write_features(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode(dataset)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&fs::read(path)?)
}
