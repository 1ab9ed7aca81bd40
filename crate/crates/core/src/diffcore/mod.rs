//! Dense linear algebra with analytic gradients, and the finite-difference
//! checker every backward rule is tested against.

mod gradcheck;
mod sum;
mod tape;
mod tensor;
mod vector;

pub use gradcheck::grad_check;
pub use sum::{dot, ksum, mean, norm};
pub use tape::{GradRecord, Gradients, NodeId, ParamId, Primitive, Tape};
pub use tensor::Tensor2;
pub use vector::{l2_normalize, log_softmax, log_sum_exp, softmax, NORM_FLOOR};
