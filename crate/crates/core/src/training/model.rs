//! Trainable models with fused forward/backward passes.
//!
//! For the meta-learner the personalized weights are never materialized
//! during training. With `a` the (adapted) age features, the score of class
//! `i` expands as
//!
//! ```text
//! s_i = <w_i^c + W2 act_i + b2, a> = <w_i^c, a> + <act_i, W2ᵀ a> + <b2, a>
//! ```
//!
//! and the hidden pre-activation of query `(b, i)` splits into a per-sample
//! part `Wh h_b` plus a per-class part `Ww w_i^c + Wo[:, i] + b1`, because the
//! one-hot block of the input only selects a column. Both identities are
//! exact; `metalearner::generate_weights` is the literal reference path.
//!
//! Two terms cancel exactly in the loss and are left out of the training
//! path: the hidden bias ahead of train-mode batch norm (it is folded back
//! into the running mean) and the class-independent score shift `<b2, a>`.
//! Their gradients are identically zero, and omitting them keeps rounding
//! noise out of both the loss and the optimizer state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::expected_value;
use crate::losses::{encode_label_distribution, hard_label, total_loss, LossConfig, Target, TargetMode};
use crate::mathcore::layers::softmax_unchecked;
use crate::mathcore::{
    dot, glorot_uniform, relu_backward, relu_forward, AffineLayer, BatchNormCache, BatchNormLayer, Matrix, Mode,
    ParamLayout,
};
use crate::metalearner::{init_params, Dims, MetaLearnerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Personalized weights from the residual meta-learner.
    Metaage,
    /// One shared bias-free classifier on age features.
    Global,
    /// MLP on concatenated age and identity features.
    Concat,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Metaage => 0,
            ModelKind::Global => 1,
            ModelKind::Concat => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Metaage),
            1 => Some(ModelKind::Global),
            2 => Some(ModelKind::Concat),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Metaage => "metaage",
            ModelKind::Global => "global",
            ModelKind::Concat => "concat",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metaage" => Ok(ModelKind::Metaage),
            "global" => Ok(ModelKind::Global),
            "concat" => Ok(ModelKind::Concat),
            other => Err(Error::invalid(format!(
                "unknown model kind {other:?} (metaage|global|concat)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalHead {
    /// `K x D`
    pub common: Matrix,
    pub grad_common: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcatNet {
    /// `H x (D + F)`, input order `[g ‖ h]`
    pub hidden: AffineLayer,
    pub bn: BatchNormLayer,
    /// `K x H`
    pub output: AffineLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelBody {
    Metaage(MetaLearnerParams),
    Global(GlobalHead),
    Concat(ConcatNet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub body: ModelBody,
    /// Optional trainable `D x D` map applied to age features first.
    pub adapter: Option<AffineLayer>,
}

/// Feature matrices of a minibatch: `B x D` age and `B x F` identity.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub age: Matrix,
    pub identity: Matrix,
}

impl BatchInputs {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let age: Vec<&[f64]> = indices.iter().map(|&i| dataset.get(i).age_feat.as_slice()).collect();
        let identity: Vec<&[f64]> = indices.iter().map(|&i| dataset.get(i).id_feat.as_slice()).collect();
        Ok(Self {
            age: Matrix::from_rows(&age)?,
            identity: Matrix::from_rows(&identity)?,
        })
    }

    pub fn len(&self) -> usize {
        self.age.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.age.rows() == 0
    }
}

/// Inputs plus training targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub labels: Vec<f64>,
    pub hard: Vec<usize>,
    pub soft: Option<Vec<Vec<f64>>>,
}

impl Batch {
    /// Only labels, sigmas and the two feature vectors are read; identity ids
    /// never enter a batch.
    pub fn from_dataset(dataset: &Dataset, indices: &[usize], mode: TargetMode) -> Result<Self> {
        let k = dataset.dims().classes;
        let labels: Vec<f64> = indices.iter().map(|&i| dataset.get(i).label).collect();
        let hard = labels.iter().map(|&y| hard_label(y, k)).collect();
        let soft = match mode {
            TargetMode::HardOnehot => None,
            TargetMode::LabelDistribution => Some(
                indices
                    .iter()
                    .map(|&i| {
                        let r = dataset.get(i);
                        let sigma = r.sigma.ok_or_else(|| {
                            Error::invalid(format!("record {i} has no sigma; label-distribution targets need one"))
                        })?;
                        encode_label_distribution(r.label, sigma, k)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Self {
            inputs: BatchInputs::from_dataset(dataset, indices)?,
            labels,
            hard,
            soft,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn target(&self, b: usize) -> Target<'_> {
        match &self.soft {
            Some(s) => Target::Distribution(&s[b]),
            None => Target::Class(self.hard[b]),
        }
    }
}

/// Result of one train-mode forward/backward.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Train-mode expected ages, one per sample.
    pub predictions: Vec<f64>,
    /// Batch statistics to fold into the running averages.
    pub bn_cache: Option<BatchNormCache>,
}

enum BodyTrace {
    Metaage {
        y: Matrix,
        act: Matrix,
        u: Matrix,
        bn: Option<BatchNormCache>,
    },
    Global,
    Concat {
        x: Matrix,
        y: Matrix,
        act: Matrix,
        bn: Option<BatchNormCache>,
    },
}

struct Trace {
    adapted: Matrix,
    /// Scores up to a per-sample constant, see `shift`.
    scores: Matrix,
    /// Per-sample constant added to every class score; absent from the loss.
    shift: Option<Vec<f64>>,
    body: BodyTrace,
}

fn identity_adapter(d: usize) -> AffineLayer {
    AffineLayer::from_parts(Matrix::identity(d), vec![0.0; d]).expect("square identity")
}

impl Model {
    /// Seeded initialization. The global head draws `W^c` exactly as the
    /// meta-learner does for the same seed. Adapters start as the identity.
    pub fn init(kind: ModelKind, dims: Dims, use_adapter: bool, seed: u64) -> Result<Self> {
        dims.validate()?;
        let body = match kind {
            ModelKind::Metaage => ModelBody::Metaage(init_params(dims, seed)?),
            ModelKind::Global => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                ModelBody::Global(GlobalHead {
                    common: glorot_uniform(dims.classes, dims.age_dim, &mut rng),
                    grad_common: Matrix::zeros(dims.classes, dims.age_dim),
                })
            }
            ModelKind::Concat => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                ModelBody::Concat(ConcatNet {
                    hidden: AffineLayer::glorot(dims.age_dim + dims.identity_dim, dims.hidden, &mut rng),
                    bn: BatchNormLayer::new(dims.hidden),
                    output: AffineLayer::glorot(dims.hidden, dims.classes, &mut rng),
                })
            }
        };
        Ok(Self {
            dims,
            body,
            adapter: use_adapter.then(|| identity_adapter(dims.age_dim)),
        })
    }

    pub fn from_metalearner(params: MetaLearnerParams, adapter: Option<AffineLayer>) -> Self {
        Self {
            dims: params.dims,
            body: ModelBody::Metaage(params),
            adapter,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.body {
            ModelBody::Metaage(_) => ModelKind::Metaage,
            ModelBody::Global(_) => ModelKind::Global,
            ModelBody::Concat(_) => ModelKind::Concat,
        }
    }

    pub fn metalearner(&self) -> Option<&MetaLearnerParams> {
        match &self.body {
            ModelBody::Metaage(p) => Some(p),
            _ => None,
        }
    }

    pub fn metalearner_mut(&mut self) -> Option<&mut MetaLearnerParams> {
        match &mut self.body {
            ModelBody::Metaage(p) => Some(p),
            _ => None,
        }
    }

    fn check_inputs(&self, inputs: &BatchInputs) -> Result<()> {
        if inputs.age.cols() != self.dims.age_dim {
            return Err(Error::shape("age features", self.dims.age_dim, inputs.age.cols()));
        }
        if inputs.identity.cols() != self.dims.identity_dim {
            return Err(Error::shape(
                "identity features",
                self.dims.identity_dim,
                inputs.identity.cols(),
            ));
        }
        if inputs.age.rows() != inputs.identity.rows() {
            return Err(Error::shape("batch rows", inputs.age.rows(), inputs.identity.rows()));
        }
        Ok(())
    }

    fn forward(&self, inputs: &BatchInputs, mode: Mode) -> Result<Trace> {
        self.check_inputs(inputs)?;
        let adapted = match &self.adapter {
            Some(a) => a.forward(&inputs.age)?,
            None => inputs.age.clone(),
        };
        let (scores, shift, body) = match &self.body {
            ModelBody::Metaage(p) => {
                let (s, shift, body) = metaage_forward(p, &adapted, &inputs.identity, mode)?;
                (s, Some(shift), body)
            }
            ModelBody::Global(g) => (adapted.matmul_transposed(&g.common)?, None, BodyTrace::Global),
            ModelBody::Concat(net) => {
                let (s, body) = concat_forward(net, &adapted, &inputs.identity, mode)?;
                (s, None, body)
            }
        };
        Ok(Trace {
            adapted,
            scores,
            shift,
            body,
        })
    }

    /// `B x K` class scores. Train mode normalizes with batch statistics but
    /// leaves the running averages unchanged.
    pub fn scores(&self, inputs: &BatchInputs, mode: Mode) -> Result<Matrix> {
        let Trace { mut scores, shift, .. } = self.forward(inputs, mode)?;
        if let Some(shift) = shift {
            for (b, c) in shift.iter().enumerate() {
                scores.row_mut(b).iter_mut().for_each(|s| *s += c);
            }
        }
        Ok(scores)
    }

    /// Eval-mode expected ages.
    pub fn predict(&self, inputs: &BatchInputs) -> Result<Vec<f64>> {
        let scores = self.forward(inputs, Mode::Eval)?.scores;
        Ok(scores
            .iter_rows()
            .map(|s| expected_value(&softmax_unchecked(s)))
            .collect())
    }

    /// Mean train-mode loss of the batch, without gradients.
    pub fn batch_loss(&self, batch: &Batch, loss: &LossConfig) -> Result<f64> {
        let trace = self.forward(&batch.inputs, Mode::Train)?;
        Ok(loss_and_dscores(&trace.scores, batch, loss)?.0)
    }

    /// Zeroes the gradient buffers, then runs a train-mode forward and
    /// backward pass, leaving `d(mean loss)/dθ` in the buffers.
    pub fn loss_and_grad(&mut self, batch: &Batch, loss: &LossConfig) -> Result<StepOutput> {
        self.zero_grad();
        let trace = self.forward(&batch.inputs, Mode::Train)?;
        let (value, dscores) = loss_and_dscores(&trace.scores, batch, loss)?;
        let predictions = trace
            .scores
            .iter_rows()
            .map(|s| expected_value(&softmax_unchecked(s)))
            .collect();
        let Trace { adapted, body, .. } = trace;
        let (d_adapted, bn_cache) = match (&mut self.body, body) {
            (ModelBody::Metaage(p), BodyTrace::Metaage { y, act, u, bn }) => {
                let cache = bn.expect("train mode");
                let d = metaage_backward(p, &adapted, &batch.inputs.identity, &y, &act, &u, &cache, &dscores)?;
                (d, Some(cache))
            }
            (ModelBody::Global(g), BodyTrace::Global) => {
                g.grad_common.add_assign(&dscores.transposed_matmul(&adapted)?)?;
                (dscores.matmul(&g.common)?, None)
            }
            (ModelBody::Concat(net), BodyTrace::Concat { x, y, act, bn }) => {
                let cache = bn.expect("train mode");
                let d_act = net.output.backward(&dscores, &act)?;
                let d_y = relu_backward(&d_act, &y)?;
                let d_pre = net.bn.backward_with(&d_y, &cache)?;
                let d_x = net.hidden.backward(&d_pre, &x)?;
                net.hidden.grad_bias.fill(0.0);
                let dd = self.dims.age_dim;
                let rows: Vec<&[f64]> = d_x.iter_rows().map(|r| &r[..dd]).collect();
                (Matrix::from_rows(&rows)?, Some(cache))
            }
            _ => unreachable!("trace matches body"),
        };
        if let Some(adapter) = &mut self.adapter {
            adapter.backward(&d_adapted, &batch.inputs.age)?;
        }
        Ok(StepOutput {
            loss: value,
            predictions,
            bn_cache,
        })
    }

    /// Folds train-mode batch statistics into the batch-norm running averages.
    pub fn apply_bn_update(&mut self, cache: &BatchNormCache) {
        let (bn, bias) = match &mut self.body {
            ModelBody::Metaage(p) => (&mut p.residual.bn, &p.residual.hidden.bias),
            ModelBody::Concat(net) => (&mut net.bn, &net.hidden.bias),
            ModelBody::Global(_) => return,
        };
        // train-mode batch means exclude the hidden bias
        let mut cache = cache.clone();
        for (m, b) in cache.batch_mean.iter_mut().zip(bias) {
            *m += b;
        }
        bn.update_running(&cache);
    }

    pub fn zero_grad(&mut self) {
        match &mut self.body {
            ModelBody::Metaage(p) => p.zero_grad(),
            ModelBody::Global(g) => g.grad_common.fill(0.0),
            ModelBody::Concat(net) => {
                net.hidden.zero_grad();
                net.bn.zero_grad();
                net.output.zero_grad();
            }
        }
        if let Some(a) = &mut self.adapter {
            a.zero_grad();
        }
    }

    /// `(name, params, grads)` in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &[f64], &[f64])> {
        let mut out: Vec<(&'static str, &[f64], &[f64])> = Vec::new();
        fn affine<'a>(
            out: &mut Vec<(&'static str, &'a [f64], &'a [f64])>,
            w: &'static str,
            b: &'static str,
            l: &'a AffineLayer,
        ) {
            out.push((w, l.weight.as_slice(), l.grad_weight.as_slice()));
            out.push((b, &l.bias, &l.grad_bias));
        }
        fn bn<'a>(out: &mut Vec<(&'static str, &'a [f64], &'a [f64])>, l: &'a BatchNormLayer) {
            out.push(("bn.gamma", &l.gamma, &l.grad_gamma));
            out.push(("bn.beta", &l.beta, &l.grad_beta));
        }
        match &self.body {
            ModelBody::Metaage(p) => {
                out.push(("common", p.common.as_slice(), p.grad_common.as_slice()));
                affine(&mut out, "hidden.weight", "hidden.bias", &p.residual.hidden);
                bn(&mut out, &p.residual.bn);
                affine(&mut out, "output.weight", "output.bias", &p.residual.output);
            }
            ModelBody::Global(g) => out.push(("common", g.common.as_slice(), g.grad_common.as_slice())),
            ModelBody::Concat(net) => {
                affine(&mut out, "hidden.weight", "hidden.bias", &net.hidden);
                bn(&mut out, &net.bn);
                affine(&mut out, "output.weight", "output.bias", &net.output);
            }
        }
        if let Some(a) = &self.adapter {
            affine(&mut out, "adapter.weight", "adapter.bias", a);
        }
        out
    }

    /// `(params, grads)` pairs in the order of [`Model::groups`].
    pub fn groups_mut(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut out: Vec<(&mut [f64], &[f64])> = Vec::new();
        fn affine<'a>(out: &mut Vec<(&'a mut [f64], &'a [f64])>, l: &'a mut AffineLayer) {
            out.push((l.weight.as_mut_slice(), l.grad_weight.as_slice()));
            out.push((&mut l.bias, &l.grad_bias));
        }
        fn bn<'a>(out: &mut Vec<(&'a mut [f64], &'a [f64])>, l: &'a mut BatchNormLayer) {
            out.push((&mut l.gamma, &l.grad_gamma));
            out.push((&mut l.beta, &l.grad_beta));
        }
        match &mut self.body {
            ModelBody::Metaage(p) => {
                out.push((p.common.as_mut_slice(), p.grad_common.as_slice()));
                affine(&mut out, &mut p.residual.hidden);
                bn(&mut out, &mut p.residual.bn);
                affine(&mut out, &mut p.residual.output);
            }
            ModelBody::Global(g) => out.push((g.common.as_mut_slice(), g.grad_common.as_slice())),
            ModelBody::Concat(net) => {
                affine(&mut out, &mut net.hidden);
                bn(&mut out, &mut net.bn);
                affine(&mut out, &mut net.output);
            }
        }
        if let Some(a) = &mut self.adapter {
            affine(&mut out, a);
        }
        out
    }

    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        for (name, p, _) in self.groups() {
            l.push(name, p.len());
        }
        l
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups().iter().map(|g| g.1.len()).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|g| g.1.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|g| g.2.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.group_sizes().iter().sum();
        if flat.len() != total {
            return Err(Error::shape("set_flat_params", total, flat.len()));
        }
        let mut offset = 0;
        for (p, _) in self.groups_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.1.iter().all(|v| v.is_finite()))
    }
}

fn loss_and_dscores(scores: &Matrix, batch: &Batch, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    let n = batch.len();
    if scores.rows() != n {
        return Err(Error::shape("batch targets", scores.rows(), n));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, scores.cols());
    for b in 0..n {
        let lg = total_loss(scores.row(b), batch.target(b), batch.hard[b], cfg)?;
        total += lg.loss * inv;
        for (g, v) in grad.row_mut(b).iter_mut().zip(&lg.grad) {
            *g = v * inv;
        }
    }
    Ok((total, grad))
}

fn metaage_forward(
    p: &MetaLearnerParams,
    adapted: &Matrix,
    identity: &Matrix,
    mode: Mode,
) -> Result<(Matrix, Vec<f64>, BodyTrace)> {
    let Dims {
        classes: k,
        age_dim: d,
        identity_dim: f,
        hidden: h,
    } = p.dims;
    let n = adapted.rows();
    let w1 = &p.residual.hidden.weight;
    let b1 = &p.residual.hidden.bias;

    // per-sample part Wh h_b
    let mut per_sample = Matrix::zeros(n, h);
    for b in 0..n {
        let hb = identity.row(b);
        let row = per_sample.row_mut(b);
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(&w1.row(j)[..f], hb);
        }
    }
    // per-class part Ww w_i^c + Wo[:, i] (+ b1 outside train mode)
    let with_bias = mode == Mode::Eval;
    let mut per_class = Matrix::zeros(k, h);
    for i in 0..k {
        let wc = p.common.row(i);
        let row = per_class.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            let wj = w1.row(j);
            *out = dot(&wj[f..f + d], wc) + wj[f + d + i] + if with_bias { b1[j] } else { 0.0 };
        }
    }
    let mut pre = Matrix::zeros(n * k, h);
    for b in 0..n {
        for i in 0..k {
            let out = pre.row_mut(b * k + i);
            for ((o, x), y) in out.iter_mut().zip(per_sample.row(b)).zip(per_class.row(i)) {
                *o = x + y;
            }
        }
    }
    let (y, bn) = match mode {
        Mode::Train => {
            let (y, cache) = p.residual.bn.forward_train(&pre)?;
            (y, Some(cache))
        }
        Mode::Eval => (p.residual.bn.forward_eval(&pre)?, None),
    };
    let act = relu_forward(&y);
    let w2 = &p.residual.output.weight;
    let b2 = &p.residual.output.bias;
    // u_b = W2ᵀ a_b
    let u = adapted.matmul(w2)?;
    let mut scores = adapted.matmul_transposed(&p.common)?;
    for b in 0..n {
        let ub = u.row(b);
        for i in 0..k {
            scores.row_mut(b)[i] += dot(act.row(b * k + i), ub);
        }
    }
    let shift = adapted.iter_rows().map(|a| dot(b2, a)).collect();
    Ok((scores, shift, BodyTrace::Metaage { y, act, u, bn }))
}

#[allow(clippy::too_many_arguments)]
fn metaage_backward(
    p: &mut MetaLearnerParams,
    adapted: &Matrix,
    identity: &Matrix,
    y: &Matrix,
    act: &Matrix,
    u: &Matrix,
    cache: &BatchNormCache,
    dscores: &Matrix,
) -> Result<Matrix> {
    let Dims {
        classes: k,
        age_dim: d,
        identity_dim: f,
        hidden: h,
    } = p.dims;
    let n = adapted.rows();

    // direct path s_i = <w_i^c, a>
    p.grad_common.add_assign(&dscores.transposed_matmul(adapted)?)?;
    let mut d_adapted = dscores.matmul(&p.common)?;

    let mut d_act = Matrix::zeros(n * k, h);
    let mut d_u = Matrix::zeros(n, h);
    for b in 0..n {
        let ub = u.row(b);
        for i in 0..k {
            let ds = dscores.get(b, i);
            let r = b * k + i;
            for (o, x) in d_act.row_mut(r).iter_mut().zip(ub) {
                *o = ds * x;
            }
            let ar = act.row(r);
            for (o, x) in d_u.row_mut(b).iter_mut().zip(ar) {
                *o += ds * x;
            }
        }
    }
    let out = &mut p.residual.output;
    d_adapted.add_assign(&d_u.matmul_transposed(&out.weight)?)?;
    out.grad_weight.add_assign(&adapted.transposed_matmul(&d_u)?)?;

    let d_y = relu_backward(&d_act, y)?;
    let d_pre = p.residual.bn.backward_with(&d_y, cache)?;

    let mut d_sample = Matrix::zeros(n, h);
    let mut d_class = Matrix::zeros(k, h);
    for b in 0..n {
        for i in 0..k {
            let r = d_pre.row(b * k + i);
            for (o, x) in d_sample.row_mut(b).iter_mut().zip(r) {
                *o += x;
            }
            for (o, x) in d_class.row_mut(i).iter_mut().zip(r) {
                *o += x;
            }
        }
    }

    let hidden = &mut p.residual.hidden;
    let g_identity = d_sample.transposed_matmul(identity)?; // H x F
    let g_common_block = d_class.transposed_matmul(&p.common)?; // H x D
    for j in 0..h {
        let gw = hidden.grad_weight.row_mut(j);
        for (o, x) in gw[..f].iter_mut().zip(g_identity.row(j)) {
            *o += x;
        }
        for (o, x) in gw[f..f + d].iter_mut().zip(g_common_block.row(j)) {
            *o += x;
        }
        for i in 0..k {
            gw[f + d + i] += d_class.get(i, j);
        }
    }
    // w_i^c also feeds the residual input
    for i in 0..k {
        let dq = d_class.row(i);
        let gc = p.grad_common.row_mut(i);
        for (j, &q) in dq.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let wj = &hidden.weight.row(j)[f..f + d];
            for (o, w) in gc.iter_mut().zip(wj) {
                *o += q * w;
            }
        }
    }
    Ok(d_adapted)
}

fn concat_forward(net: &ConcatNet, adapted: &Matrix, identity: &Matrix, mode: Mode) -> Result<(Matrix, BodyTrace)> {
    let rows: Vec<Vec<f64>> = adapted
        .iter_rows()
        .zip(identity.iter_rows())
        .map(|(a, h)| a.iter().chain(h).copied().collect())
        .collect();
    let x = Matrix::from_rows(&rows)?;
    let (y, bn) = match mode {
        Mode::Train => {
            let (y, c) = net.bn.forward_train(&x.matmul_transposed(&net.hidden.weight)?)?;
            (y, Some(c))
        }
        Mode::Eval => (net.bn.forward_eval(&net.hidden.forward(&x)?)?, None),
    };
    let act = relu_forward(&y);
    let scores = net.output.forward(&act)?;
    Ok((scores, BodyTrace::Concat { x, y, act, bn }))
}
