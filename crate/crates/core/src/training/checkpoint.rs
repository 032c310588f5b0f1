//! MAPC parameter checkpoints.
//!
//! ```text
//! v1 (meta-learner without adapter):
//!   b"MAPC" | u8 1 | u32 K, D, F, H
//!   common | hidden.{W,b} | bn.{gamma,beta,running_mean,running_var} | output.{W,b}
//!
//! v2 (any model):
//!   b"MAPC" | u8 2 | u8 kind | u8 has_adapter | u32 K, D, F, H
//!   body (metaage: as v1; global: common; concat: hidden.{W,b} | bn | output.{W,b})
//!   adapter.{W,b} if has_adapter
//! ```
//!
//! Reals are `f64` little-endian, matrices row-major. A model is written as
//! v1 whenever that layout can hold it, so v1 files round-trip unchanged.

use std::fs;
use std::path::Path;

use super::model::{ConcatNet, GlobalHead, Model, ModelBody, ModelKind};
use crate::error::{Error, Result};
use crate::mathcore::{AffineLayer, BatchNormLayer, Matrix};
use crate::metalearner::{Dims, MetaLearnerParams, ResidualNet};

pub const MAGIC: &[u8; 4] = b"MAPC";

struct Writer(Vec<u8>);

impl Writer {
    fn reals(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn affine(&mut self, l: &AffineLayer) {
        self.reals(l.weight.as_slice());
        self.reals(&l.bias);
    }

    fn bn(&mut self, l: &BatchNormLayer) {
        self.reals(&l.gamma);
        self.reals(&l.beta);
        self.reals(&l.running_mean);
        self.reals(&l.running_var);
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let d = model.dims;
    d.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    let v1 = model.kind() == ModelKind::Metaage && model.adapter.is_none();
    if v1 {
        w.0.push(1);
    } else {
        w.0.push(2);
        w.0.push(model.kind().tag());
        w.0.push(u8::from(model.adapter.is_some()));
    }
    for v in [d.classes, d.age_dim, d.identity_dim, d.hidden] {
        w.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match &model.body {
        ModelBody::Metaage(p) => {
            p.check()?;
            w.reals(p.common.as_slice());
            w.affine(&p.residual.hidden);
            w.bn(&p.residual.bn);
            w.affine(&p.residual.output);
        }
        ModelBody::Global(g) => w.reals(g.common.as_slice()),
        ModelBody::Concat(net) => {
            w.affine(&net.hidden);
            w.bn(&net.bn);
            w.affine(&net.output);
        }
    }
    if let Some(a) = &model.adapter {
        w.affine(a);
    }
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn need(&self, n: usize, what: &str) -> Result<()> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {have} remain"),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.need(1, what)?;
        self.pos += 1;
        Ok(self.bytes[self.pos - 1])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        self.need(4, what)?;
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes"));
        self.pos += 4;
        Ok(v as usize)
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what}: size overflow")))?;
        self.need(len, what)?;
        let start = self.pos;
        let out: Vec<f64> = self.bytes[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (start + 8 * i) as u64,
                format!("non-finite value in {what}"),
            ));
        }
        self.pos += len;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let data = self.reals(rows * cols, what)?;
        Matrix::from_vec(rows, cols, data)
    }

    fn affine(&mut self, input: usize, output: usize, what: &str) -> Result<AffineLayer> {
        let w = self.matrix(output, input, what)?;
        let b = self.reals(output, what)?;
        AffineLayer::from_parts(w, b)
    }

    fn bn(&mut self, width: usize) -> Result<BatchNormLayer> {
        let mut l = BatchNormLayer::new(width);
        l.gamma = self.reals(width, "bn.gamma")?;
        l.beta = self.reals(width, "bn.beta")?;
        l.running_mean = self.reals(width, "bn.running_mean")?;
        let at = self.pos;
        l.running_var = self.reals(width, "bn.running_var")?;
        if let Some(i) = l.running_var.iter().position(|&v| v < 0.0) {
            return Err(Error::format((at + 8 * i) as u64, "negative bn.running_var"));
        }
        Ok(l)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::format(0, format!("bad magic {got:?}, expected \"MAPC\"")));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8("version")?;
    let (kind, has_adapter) = match version {
        1 => (ModelKind::Metaage, false),
        2 => {
            let at = r.pos;
            let tag = r.u8("kind")?;
            let kind = ModelKind::from_tag(tag)
                .ok_or_else(|| Error::format(at as u64, format!("unknown model kind tag {tag}")))?;
            let at = r.pos;
            let flag = r.u8("adapter flag")?;
            if flag > 1 {
                return Err(Error::format(
                    at as u64,
                    format!("adapter flag must be 0 or 1, got {flag}"),
                ));
            }
            (kind, flag == 1)
        }
        v => return Err(Error::format(4, format!("unsupported version {v}, expected 1 or 2"))),
    };
    let dims_at = r.pos;
    let dims = Dims::new(r.u32("K")?, r.u32("D")?, r.u32("F")?, r.u32("H")?);
    dims.validate()
        .map_err(|e| Error::format(dims_at as u64, e.to_string()))?;
    let Dims {
        classes: k,
        age_dim: d,
        identity_dim: f,
        hidden: h,
    } = dims;
    let body = match kind {
        ModelKind::Metaage => {
            let common = r.matrix(k, d, "common")?;
            let hidden = r.affine(dims.residual_input_dim(), h, "hidden")?;
            let bn = r.bn(h)?;
            let output = r.affine(h, d, "output")?;
            ModelBody::Metaage(MetaLearnerParams {
                dims,
                grad_common: Matrix::zeros(k, d),
                common,
                residual: ResidualNet { hidden, bn, output },
            })
        }
        ModelKind::Global => ModelBody::Global(GlobalHead {
            common: r.matrix(k, d, "common")?,
            grad_common: Matrix::zeros(k, d),
        }),
        ModelKind::Concat => {
            let hidden = r.affine(d + f, h, "hidden")?;
            let bn = r.bn(h)?;
            let output = r.affine(h, k, "output")?;
            ModelBody::Concat(ConcatNet { hidden, bn, output })
        }
    };
    let adapter = if has_adapter {
        Some(r.affine(d, d, "adapter")?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after parameters", bytes.len() - r.pos),
        ));
    }
    Ok(Model { dims, body, adapter })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}
