//! Dense NCHW feature tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-dimensional batch tensor laid out as `[batch, channels, height, width]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot have shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ni, ci, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn index(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let i = self.index(idx);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len().max(1) as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [n, ca, h, w] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Self { shape: [n, ca + cb, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let [n, ct, h, w] = self.shape;
        assert!(c <= ct);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * c * plane);
        let mut b = Vec::with_capacity(n * (ct - c) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..c * plane]);
            b.extend_from_slice(&s[c * plane..]);
        }
        (Self { shape: [n, c, h, w], data: a }, Self { shape: [n, ct - c, h, w], data: b })
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).finish_non_exhaustive()
    }
}
