use super::{Layer, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    fn pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let [n, c, h, w] = x.shape();
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("cannot max-pool a {h}x{w} map")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let out = Tensor::from_fn([n, c, oh, ow], |[b, ch, y, xx]| {
            let mut best = x.index([b, ch, 2 * y, 2 * xx]);
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let i = x.index([b, ch, 2 * y + dy, 2 * xx + dx]);
                if x.data()[i] > x.data()[best] {
                    best = i;
                }
            }
            argmax.push(best);
            x.data()[best]
        });
        Ok((out, argmax))
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Self::pool(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, argmax) = Self::pool(x)?;
        self.cache = Some((x.shape(), argmax));
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| Error::Shape("pool backward without forward_train".into()))?;
        if dy.len() != argmax.len() {
            return Err(Error::Shape("pool backward: gradient does not match cached output".into()));
        }
        let mut dx = Tensor::zeros(shape);
        for (&i, &g) in argmax.iter().zip(dy.data()) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }

    fn visit_params<'a>(&'a self, _: &str, _: &mut dyn FnMut(String, &'a Param<T>)) {}

    fn visit_params_mut<'a>(&'a mut self, _: &str, _: &mut dyn FnMut(String, &'a mut Param<T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_and_routes_gradient_to_max() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]).unwrap();
        let mut pool = MaxPool2d::new();
        let y = pool.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = pool.backward(&Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
