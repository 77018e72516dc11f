use rand::Rng;

use crate::scalar::Scalar;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    /// Frozen parameters still propagate input gradients but never accumulate their own.
    pub requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], grad: vec![T::zero(); n], requires_grad: true }
    }

    pub fn from_data(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter data/shape mismatch");
        let grad = vec![T::zero(); data.len()];
        Self { shape: shape.to_vec(), data, grad, requires_grad: true }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|d| *d = v);
    }
}

/// `U(-bound, bound)` initialization, the usual `1/sqrt(fan_in)` convolution default.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(p: &mut Param<T>, bound: f64, rng: &mut R) {
    for v in &mut p.data {
        *v = T::lit((rng.random::<f64>() * 2.0 - 1.0) * bound);
    }
}
