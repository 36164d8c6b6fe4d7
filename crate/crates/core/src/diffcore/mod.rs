//! Minimal reverse-mode differentiable core: tensors, a recording tape,
//! the ops the U-net and the statistical losses need, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, random_projection, Coverage, GradCheckReport};
pub(crate) use tape::soft_weights;
pub use tape::{BatchStats, Gradients, HistGrid, Tape, Var};
pub use tensor::Tensor3;

/// A named trainable (or frozen) tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor3,
    pub grad: Tensor3,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor3) -> Self {
        let grad = Tensor3::zeros_like(&value);
        Self { name: name.into(), value, grad, trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Add the parameter gradients of a reverse pass into `params[i].grad`.
pub fn accumulate_grads(grads: &Gradients, params: &mut [Parameter]) {
    for (i, g) in grads.params() {
        params[i].grad.add_assign(g);
    }
}
