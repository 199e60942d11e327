//! Dense matrices, stable nonlinearities, seeded randomness and gradient
//! checking.

pub mod gradcheck;
pub mod matrix;
pub mod rng;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamError, ParamSet};
pub use matrix::{
    dot, log_sum_exp, softmax, softmax_backward, softmax_in_place, softmax_rows_backward, Matrix,
};
pub use rng::SeededStream;
