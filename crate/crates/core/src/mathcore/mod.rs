//! Dense linear algebra, layer passes with analytic gradients, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod matrix;

pub use gradcheck::{central_difference, grad_check, relative_error, GradCheckReport, ParamLayout, FD_STEP};
pub use layers::{
    affine_backward, affine_forward, glorot_uniform, relu_backward, relu_forward, softmax, AffineLayer, BatchNormCache,
    BatchNormLayer, Mode,
};
pub use matrix::{dot, Matrix};
