//! Dense tensors, a reverse-mode gradient tape, gradient checking and SGD.

mod check;
mod gemm;
mod optim;
mod tape;
mod tensor;

pub use check::{compare_gradients, grad_check, sample_coords, GradCheckReport};
pub use optim::{Sgd, StepDecay};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, softmax_ce, sq_dist, DenseTensor};
