use super::{join, Layer, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negative slope of the LeakyReLU used in feature gates.
pub const LEAKY_SLOPE: f64 = 0.2;

/// PReLU's initial negative slope.
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Parametric ReLU with a single learned slope.
    PRelu,
    LeakyRelu,
    Sigmoid,
    /// `x · sigmoid(x)`.
    Swish,
    /// `(tanh(x) + 1) / 2`, a tanh output remapped onto `[0, 1]`.
    UnitTanh,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_derivative<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::lit(LEAKY_SLOPE)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationLayer<T> {
    kind: Activation,
    /// Present only for [`Activation::PRelu`].
    pub slope: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ActivationLayer<T> {
    pub fn new(kind: Activation) -> Self {
        let slope = (kind == Activation::PRelu).then(|| Param::from_data(&[1], vec![T::lit(PRELU_INIT)]));
        Self { kind, slope, cache: None }
    }

    pub fn kind(&self) -> Activation {
        self.kind
    }

    #[inline]
    fn apply(&self, x: T) -> T {
        match self.kind {
            Activation::Relu => x.max(T::zero()),
            Activation::PRelu => {
                let a = self.slope.as_ref().expect("prelu slope").data[0];
                if x > T::zero() {
                    x
                } else {
                    a * x
                }
            }
            Activation::LeakyRelu => leaky(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
            Activation::UnitTanh => (x.tanh() + T::one()) * T::lit(0.5),
        }
    }

    #[inline]
    fn derivative(&self, x: T) -> T {
        match self.kind {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::PRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    self.slope.as_ref().expect("prelu slope").data[0]
                }
            }
            Activation::LeakyRelu => leaky_derivative(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::UnitTanh => {
                let t = x.tanh();
                (T::one() - t * t) * T::lit(0.5)
            }
        }
    }
}

impl<T: Scalar> Layer<T> for ActivationLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| self.apply(v)))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| Error::Shape("activation backward without forward_train".into()))?;
        let dx = x.zip_map(dy, |v, g| g * self.derivative(v))?;
        if let Some(slope) = self.slope.as_mut().filter(|p| p.requires_grad) {
            let g: T = x
                .data()
                .iter()
                .zip(dy.data())
                .filter(|(v, _)| **v <= T::zero())
                .map(|(&v, &g)| v * g)
                .sum();
            slope.grad[0] += g;
        }
        Ok(dx)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        if let Some(p) = &self.slope {
            f(join(prefix, "slope"), p);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        if let Some(p) = &mut self.slope {
            f(join(prefix, "slope"), p);
        }
    }
}
