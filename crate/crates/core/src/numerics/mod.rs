//! Dense f64 math: tensors, softmax, linear layers, parameter storage and a
//! finite-difference gradient checker.

mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheckConfig, GradCheckReport, DEFAULT_EPS,
};
pub use ops::{
    dot, linear_backward, linear_backward_params, linear_forward, log_sum_exp, relu, softmax,
    softmax_backward,
};
pub(crate) use ops::softmax_unchecked;
pub use params::{xavier_uniform, GradStore, ParamStore};
pub use tensor::Tensor;
