//! Dense matrices and a reverse-mode tape covering exactly the operations the
//! model, the optimizers and the toy trainer need.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_reference};
pub use matrix::{binary, cosine, matmul, softmax_rows, unary, Binary, Matrix, Unary};
pub(crate) use matrix::argmax_excluding;
pub use tape::{Gradients, Tape, Var};
