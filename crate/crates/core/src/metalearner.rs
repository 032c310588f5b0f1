//! Personalized weight generation.
//!
//! Each class weight is the shared row plus an identity-conditioned residual:
//!
//! ```text
//! w_i^p = w_i^c + r([h ‖ w_i^c ‖ onehot(i)])
//! r(x)  = output(relu(bn(hidden(x))))
//! ```
//!
//! The residual network is queried once per class, so it only ever emits a
//! `D`-dimensional vector; the `K` queries for a person are stacked into one
//! `K`-row batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PersonalizedWeights;
use crate::mathcore::{glorot_uniform, relu_forward, AffineLayer, BatchNormLayer, Matrix, Mode};

/// Model dimensions: `K` classes, `D` age features, `F` identity features,
/// `H` hidden units of the residual network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub classes: usize,
    pub age_dim: usize,
    pub identity_dim: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            classes: 101,
            age_dim: 64,
            identity_dim: 32,
            hidden: 128,
        }
    }
}

impl Dims {
    pub fn new(classes: usize, age_dim: usize, identity_dim: usize, hidden: usize) -> Self {
        Self {
            classes,
            age_dim,
            identity_dim,
            hidden,
        }
    }

    /// VGG-16 age features, ResNet-50 identity features, 101 ages, 8192 hidden units.
    pub fn full_scale() -> Self {
        Self::new(101, 4096, 2048, 8192)
    }

    /// Width of `[h ‖ w_i^c ‖ onehot(i)]`.
    pub fn residual_input_dim(&self) -> usize {
        self.identity_dim + self.age_dim + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("age_dim", self.age_dim),
            ("identity_dim", self.identity_dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("dimension `{name}` must be at least 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::invalid(format!("dimension `{name}` exceeds u32")));
            }
        }
        Ok(())
    }
}

/// `r(·)`: affine → batch norm → ReLU → affine.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    /// `H x (F + D + K)`
    pub hidden: AffineLayer,
    pub bn: BatchNormLayer,
    /// `D x H`
    pub output: AffineLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLearnerParams {
    pub dims: Dims,
    /// Shared class weights `W^c`, `K x D`.
    pub common: Matrix,
    pub grad_common: Matrix,
    pub residual: ResidualNet,
}

impl MetaLearnerParams {
    pub fn check(&self) -> Result<()> {
        let d = self.dims;
        d.validate()?;
        let expect = |op: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::shape(op, format!("{want:?}"), format!("{got:?}")))
            }
        };
        expect("common", self.common.shape(), (d.classes, d.age_dim))?;
        expect(
            "residual.hidden",
            self.residual.hidden.weight.shape(),
            (d.hidden, d.residual_input_dim()),
        )?;
        expect(
            "residual.output",
            self.residual.output.weight.shape(),
            (d.age_dim, d.hidden),
        )?;
        if self.residual.bn.width() != d.hidden {
            return Err(Error::shape("residual.bn", d.hidden, self.residual.bn.width()));
        }
        Ok(())
    }

    /// Zeroes the residual output layer, so every person gets `W^c`.
    pub fn zero_residual_output(&mut self) {
        self.residual.output.weight.fill(0.0);
        self.residual.output.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn residual_output_is_zero(&self) -> bool {
        self.residual.output.weight.as_slice().iter().all(|&w| w == 0.0)
            && self.residual.output.bias.iter().all(|&b| b == 0.0)
    }

    pub fn zero_grad(&mut self) {
        self.grad_common.fill(0.0);
        self.residual.hidden.zero_grad();
        self.residual.bn.zero_grad();
        self.residual.output.zero_grad();
    }
}

/// Seeded initialization: Glorot-uniform weights (including `W^c`), zero
/// biases, unit gamma, zero beta.
pub fn init_params(dims: Dims, seed: u64) -> Result<MetaLearnerParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = glorot_uniform(dims.classes, dims.age_dim, &mut rng);
    let hidden = AffineLayer::glorot(dims.residual_input_dim(), dims.hidden, &mut rng);
    let output = AffineLayer::glorot(dims.hidden, dims.age_dim, &mut rng);
    Ok(MetaLearnerParams {
        dims,
        grad_common: Matrix::zeros(dims.classes, dims.age_dim),
        common,
        residual: ResidualNet {
            hidden,
            bn: BatchNormLayer::new(dims.hidden),
            output,
        },
    })
}

pub fn one_hot(index: usize, classes: usize) -> Result<Vec<f64>> {
    if index >= classes {
        return Err(Error::invalid(format!("class index {index} out of range 0..{classes}")));
    }
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    Ok(v)
}

/// `[h ‖ w_i^c ‖ onehot(i)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualInput(pub Vec<f64>);

pub fn build_residual_input(
    identity_features: &[f64],
    common_row: &[f64],
    class: usize,
    classes: usize,
) -> Result<ResidualInput> {
    let code = one_hot(class, classes)?;
    let mut v = Vec::with_capacity(identity_features.len() + common_row.len() + classes);
    v.extend_from_slice(identity_features);
    v.extend_from_slice(common_row);
    v.extend_from_slice(&code);
    Ok(ResidualInput(v))
}

fn check_identity(params: &MetaLearnerParams, h: &[f64]) -> Result<()> {
    if h.len() != params.dims.identity_dim {
        return Err(Error::shape("identity features", params.dims.identity_dim, h.len()));
    }
    Ok(())
}

/// Runs the residual net on a stack of inputs. Train mode normalizes with the
/// statistics of this stack and leaves the running averages untouched.
fn residual_forward(net: &ResidualNet, inputs: &Matrix, mode: Mode) -> Result<Matrix> {
    let pre = net.hidden.forward(inputs)?;
    let normed = match mode {
        Mode::Train => net.bn.forward_train(&pre)?.0,
        Mode::Eval => net.bn.forward_eval(&pre)?,
    };
    net.output.forward(&relu_forward(&normed))
}

fn stacked_inputs(params: &MetaLearnerParams, identities: &[&[f64]]) -> Result<Matrix> {
    let d = params.dims;
    let mut rows = Vec::with_capacity(identities.len() * d.classes);
    for h in identities {
        check_identity(params, h)?;
        for i in 0..d.classes {
            rows.push(build_residual_input(h, params.common.row(i), i, d.classes)?.0);
        }
    }
    Matrix::from_rows(&rows)
}

/// `w_i^p` for one class. In train mode the single query would form a batch
/// of one, which batch norm rejects.
pub fn generate_class_weight(
    params: &MetaLearnerParams,
    identity_features: &[f64],
    class: usize,
    mode: Mode,
) -> Result<Vec<f64>> {
    check_identity(params, identity_features)?;
    let d = params.dims;
    if class >= d.classes {
        return Err(Error::invalid(format!(
            "class index {class} out of range 0..{}",
            d.classes
        )));
    }
    let input = build_residual_input(identity_features, params.common.row(class), class, d.classes)?;
    let residual = residual_forward(&params.residual, &Matrix::row_vector(&input.0), mode)?;
    Ok(params
        .common
        .row(class)
        .iter()
        .zip(residual.row(0))
        .map(|(c, r)| c + r)
        .collect())
}

/// `W^p` for one person: all `K` class queries as one batch.
pub fn generate_weights(
    params: &MetaLearnerParams,
    identity_features: &[f64],
    mode: Mode,
) -> Result<PersonalizedWeights> {
    Ok(generate_weights_batch_rows(params, &[identity_features], mode)?
        .pop()
        .expect("one identity in, one matrix out"))
}

/// `W^p` for every row of `identities` (`B x F`). In train mode all `B * K`
/// queries share one batch-norm batch.
pub fn generate_weights_batch(
    params: &MetaLearnerParams,
    identities: &Matrix,
    mode: Mode,
) -> Result<Vec<PersonalizedWeights>> {
    if identities.rows() == 0 {
        return Err(Error::invalid("generate_weights_batch needs at least one sample"));
    }
    let rows: Vec<&[f64]> = identities.iter_rows().collect();
    generate_weights_batch_rows(params, &rows, mode)
}

fn generate_weights_batch_rows(
    params: &MetaLearnerParams,
    identities: &[&[f64]],
    mode: Mode,
) -> Result<Vec<PersonalizedWeights>> {
    let d = params.dims;
    let inputs = stacked_inputs(params, identities)?;
    let residual = residual_forward(&params.residual, &inputs, mode)?;
    let mut out = Vec::with_capacity(identities.len());
    for b in 0..identities.len() {
        let mut w = params.common.clone();
        for i in 0..d.classes {
            for (wv, r) in w.row_mut(i).iter_mut().zip(residual.row(b * d.classes + i)) {
                *wv += r;
            }
        }
        out.push(PersonalizedWeights(w));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Dims {
        Dims::new(5, 8, 6, 16)
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Perturb batch-norm state away from its identity initialization.
    fn with_bn_state(mut p: MetaLearnerParams, seed: u64) -> MetaLearnerParams {
        let h = p.dims.hidden;
        let v = random_vec(4 * h, seed);
        for c in 0..h {
            p.residual.bn.gamma[c] = 1.0 + 0.3 * v[c];
            p.residual.bn.beta[c] = 0.2 * v[h + c];
            p.residual.bn.running_mean[c] = 0.5 * v[2 * h + c];
            p.residual.bn.running_var[c] = 0.5 + v[3 * h + c].abs();
        }
        p
    }

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(one_hot(5, 3).is_err());
    }

    #[test]
    fn residual_input_layout() {
        let x = build_residual_input(&[1.0, 2.0], &[3.0, 4.0], 1, 2).unwrap();
        assert_eq!(x.0, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0]);
        let x = build_residual_input(&[9.0], &[8.0, 7.0], 0, 3).unwrap();
        assert_eq!(&x.0[3..], &[1.0, 0.0, 0.0]);
        assert_eq!(Dims::full_scale().residual_input_dim(), 6245);
    }

    #[test]
    fn full_scale_dims_are_valid() {
        let d = Dims::full_scale();
        assert!(d.validate().is_ok());
        assert_eq!(d.hidden, 8192);
    }

    #[test]
    #[ignore = "allocates ~700 MB of parameters"]
    fn full_scale_init() {
        let p = init_params(Dims::full_scale(), 0).unwrap();
        p.check().unwrap();
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(init_params(Dims::new(0, 2, 2, 2), 0).is_err());
        assert!(init_params(Dims::new(3, 2, 2, 0), 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(tiny(), 11).unwrap();
        let b = init_params(tiny(), 11).unwrap();
        let c = init_params(tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.common, c.common);
        assert_ne!(a.residual.hidden.weight, c.residual.hidden.weight);
        a.check().unwrap();
    }

    #[test]
    fn zero_residual_gives_common_weights() {
        let mut p = with_bn_state(init_params(tiny(), 3).unwrap(), 4);
        p.zero_residual_output();
        for seed in 0..5 {
            let h = random_vec(6, seed);
            for i in 0..5 {
                let w = generate_class_weight(&p, &h, i, Mode::Eval).unwrap();
                assert_eq!(w.as_slice(), p.common.row(i));
            }
            assert_eq!(generate_weights(&p, &h, Mode::Eval).unwrap().0, p.common);
        }
    }

    #[test]
    fn different_identities_differ_and_same_identity_is_bitwise_equal() {
        let p = init_params(tiny(), 5).unwrap();
        for seed in 0..10 {
            let h1 = random_vec(6, 100 + seed);
            let h2 = random_vec(6, 200 + seed);
            let a = generate_class_weight(&p, &h1, 2, Mode::Eval).unwrap();
            let b = generate_class_weight(&p, &h2, 2, Mode::Eval).unwrap();
            let a2 = generate_class_weight(&p, &h1, 2, Mode::Eval).unwrap();
            assert_ne!(a, b);
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                a2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn batched_equals_looped_in_eval_mode() {
        let p = with_bn_state(init_params(tiny(), 8).unwrap(), 9);
        let h = random_vec(6, 1);
        let w = generate_weights(&p, &h, Mode::Eval).unwrap();
        for i in 0..5 {
            let row = generate_class_weight(&p, &h, i, Mode::Eval).unwrap();
            for (a, b) in row.iter().zip(w.0.row(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_class_model() {
        let p = init_params(Dims::new(1, 3, 2, 4), 2).unwrap();
        let h = [0.3, -0.4];
        let w = generate_weights(&p, &h, Mode::Eval).unwrap();
        assert_eq!(
            w.0.row(0),
            generate_class_weight(&p, &h, 0, Mode::Eval).unwrap().as_slice()
        );
    }

    #[test]
    fn batch_of_one_matches_single_and_is_permutation_equivariant() {
        let p = with_bn_state(init_params(tiny(), 21).unwrap(), 22);
        let rows: Vec<Vec<f64>> = (0..4).map(|s| random_vec(6, 30 + s)).collect();
        let single = generate_weights(&p, &rows[0], Mode::Eval).unwrap();
        let b1 = generate_weights_batch(&p, &Matrix::from_rows(&rows[..1]).unwrap(), Mode::Eval).unwrap();
        assert_eq!(b1[0], single);

        let all = generate_weights_batch(&p, &Matrix::from_rows(&rows).unwrap(), Mode::Eval).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let all_p = generate_weights_batch(&p, &Matrix::from_rows(&permuted).unwrap(), Mode::Eval).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(all_p[j], all[i]);
        }
    }

    #[test]
    fn train_mode_uses_batch_statistics() {
        let p = init_params(tiny(), 1).unwrap();
        let h = random_vec(6, 3);
        assert!(generate_class_weight(&p, &h, 0, Mode::Train).is_err());
        let w_train = generate_weights(&p, &h, Mode::Train).unwrap();
        let w_eval = generate_weights(&p, &h, Mode::Eval).unwrap();
        assert_ne!(w_train, w_eval);
    }

    #[test]
    fn residual_does_not_depend_on_class_weights_of_other_rows_or_age_features() {
        // w_i^p - w_i^c is a function of (h, i, w_i^c, Ω) only
        let p = with_bn_state(init_params(tiny(), 40).unwrap(), 41);
        let h = random_vec(6, 42);
        let w = generate_weights(&p, &h, Mode::Eval).unwrap();
        let mut q = p.clone();
        for v in q.common.row_mut(3) {
            *v += 0.5;
        }
        let w2 = generate_weights(&q, &h, Mode::Eval).unwrap();
        for i in [0, 1, 2, 4] {
            assert_eq!(w.0.row(i), w2.0.row(i));
        }
    }

    #[test]
    fn identity_dim_mismatch() {
        let p = init_params(tiny(), 1).unwrap();
        assert!(generate_weights(&p, &[0.0; 5], Mode::Eval).is_err());
        assert!(generate_class_weight(&p, &[0.0; 6], 5, Mode::Eval).is_err());
    }
}
