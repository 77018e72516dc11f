//! Minimal layer library with hand-written backward passes.
//!
//! Every layer offers a cache-free inference [`Layer::forward`], and a
//! training pair [`Layer::forward_train`] / [`Layer::backward`]. The training
//! forward caches what the backward pass needs; `backward` must follow the
//! matching `forward_train` before the layer is trained on a new input.
//! Parameter gradients accumulate until [`zero_grads`] is called.

mod activation;
mod conv;
mod param;
mod pool;

pub use activation::{leaky, leaky_derivative, sigmoid, Activation, ActivationLayer, LEAKY_SLOPE};
pub use conv::{Conv2d, ConvTranspose2d};
pub use param::{init_uniform, Param};
pub use pool::MaxPool2d;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Layer<T: Scalar> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named parameters in visitation order.
pub fn named_params<T: Scalar, L: Layer<T> + ?Sized>(layer: &L) -> Vec<(String, &Param<T>)> {
    let mut out = Vec::new();
    layer.visit_params("", &mut |name, p| out.push((name, p)));
    out
}

pub fn named_params_mut<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L) -> Vec<(String, &mut Param<T>)> {
    let mut out = Vec::new();
    layer.visit_params_mut("", &mut |name, p| out.push((name, p)));
    out
}

pub fn zero_grads<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L) {
    layer.visit_params_mut("", &mut |_, p| p.zero_grad());
}

/// Number of trainable scalars.
pub fn count_params<T: Scalar, L: Layer<T> + ?Sized>(layer: &L) -> usize {
    let mut n = 0;
    layer.visit_params("", &mut |_, p| {
        if p.requires_grad {
            n += p.len()
        }
    });
    n
}

pub fn set_requires_grad<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L, flag: bool) {
    layer.visit_params_mut("", &mut |_, p| p.requires_grad = flag);
}

/// Runs layers in order.
pub fn forward_seq<T: Scalar>(layers: &[impl Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for l in layers {
        h = l.forward(&h)?;
    }
    Ok(h)
}
