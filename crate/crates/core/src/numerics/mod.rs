//! Dense arrays, a differentiation tape and the Adam optimizer.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use optim::{Adam, AdamConfig};
pub use params::{xavier_uniform, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_sum_exp, matmul, softmax_in_place, Tensor};

#[cfg(test)]
mod tests;
