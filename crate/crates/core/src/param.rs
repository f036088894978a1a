//! Trainable parameters and named traversal of model state.

use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (false for biases and norm affine terms).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One named piece of model state.
pub enum Entry<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as running statistics.
    Buffer(&'a mut Tensor),
}

/// Walks a model's parameters and buffers in a fixed order with stable,
/// dot-separated names.
pub trait Visit {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<M: Visit + ?Sized>(model: &mut M) {
    model.visit("", &mut |_, e| {
        if let Entry::Param(p) = e {
            p.zero_grad();
        }
    });
}

/// Total number of trainable scalars.
pub fn param_count<M: Visit + ?Sized>(model: &mut M) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, e| {
        if let Entry::Param(p) = e {
            n += p.value.len();
        }
    });
    n
}
