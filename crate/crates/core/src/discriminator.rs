//! Conditional patch discriminator `D(candidate, reference)`.
//!
//! Nine convolutions over the channel-wise concatenation of candidate and
//! reference. Layers 1, 3, 5, 7 are 3×3 stride 2 and double the width
//! (`base, 2·base, 4·base, 8·base`); layers 2, 4, 6, 8 are 3×3 stride 1. All
//! eight use swish. Layer 9 is a 1×1 projection to one channel with a sigmoid,
//! giving an `(H/16)×(W/16)` map of scores in `(0, 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Activation, ActivationLayer, Conv2d, Layer, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DISCRIMINATOR_LAYERS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    pub convs: Vec<Conv2d<T>>,
    acts: Vec<ActivationLayer<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(DISCRIMINATOR_LAYERS);
        let mut acts = Vec::with_capacity(DISCRIMINATOR_LAYERS);
        let mut width = 6;
        for layer in 1..DISCRIMINATOR_LAYERS {
            if layer % 2 == 1 {
                let next = config.base_channels << (layer / 2);
                convs.push(Conv2d::new(width, next, 3, 2, 1).init(&mut rng));
                width = next;
            } else {
                convs.push(Conv2d::new(width, width, 3, 1, 1).init(&mut rng));
            }
            acts.push(ActivationLayer::new(Activation::Swish));
        }
        convs.push(Conv2d::new(width, 1, 1, 1, 0).init(&mut rng));
        acts.push(ActivationLayer::new(Activation::Sigmoid));
        Ok(Self { config, convs, acts })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn head(&mut self) -> &mut Conv2d<T> {
        self.convs.last_mut().expect("nine layers")
    }

    fn pair(candidate: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
        if candidate.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "discriminator inputs differ: candidate {:?} vs reference {:?}",
                candidate.shape(),
                reference.shape()
            )));
        }
        let [_, c, h, w] = candidate.shape();
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "discriminator needs 3-channel inputs with height and width divisible by 16, got {:?}",
                candidate.shape()
            )));
        }
        Tensor::concat_channels(candidate, reference)
    }

    /// Score map `N×1×(H/16)×(W/16)`.
    pub fn score(&self, candidate: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(&Self::pair(candidate, reference)?)
    }

    pub fn score_train(&mut self, candidate: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
        let x = Self::pair(candidate, reference)?;
        self.forward_train(&x)
    }

    /// Backpropagates a score gradient; returns the gradient with respect to the candidate.
    pub fn backward_candidate(&mut self, grad_scores: &Tensor<T>) -> Result<Tensor<T>> {
        let dx = self.backward(grad_scores)?;
        Ok(dx.split_channels(3).0)
    }
}

impl<T: Scalar> Layer<T> for Discriminator<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv, act) in self.convs.iter().zip(&self.acts) {
            h = act.forward(&conv.forward(&h)?)?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv, act) in self.convs.iter_mut().zip(self.acts.iter_mut()) {
            h = conv.forward_train(&h)?;
            h = act.forward_train(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for (conv, act) in self.convs.iter_mut().zip(self.acts.iter_mut()).rev() {
            d = act.backward(&d)?;
            d = conv.backward(&d)?;
        }
        Ok(d)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit_params(&join(prefix, &format!("conv.{i}")), f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params_mut(&join(prefix, &format!("conv.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_doubling_schedule() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 0).unwrap();
        let widths: Vec<_> = d.convs.iter().map(|c| (c.out_channels(), c.stride(), c.kernel())).collect();
        assert_eq!(
            widths,
            vec![(32, 2, 3), (32, 1, 3), (64, 2, 3), (64, 1, 3), (128, 2, 3), (128, 1, 3), (256, 2, 3), (256, 1, 3), (1, 1, 1)]
        );
        assert_eq!(d.convs[0].in_channels(), 6);
    }

    #[test]
    fn zero_head_scores_half() {
        let mut d = Discriminator::<f64>::new(DiscriminatorConfig { base_channels: 4 }, 1).unwrap();
        d.head().weight.fill(0.0);
        d.head().bias.fill(0.0);
        let x = Tensor::full([2, 3, 32, 32], 0.3);
        let s = d.score(&x, &x).unwrap();
        assert_eq!(s.shape(), [2, 1, 2, 2]);
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig { base_channels: 2 }, 1).unwrap();
        let err = d.score(&Tensor::zeros([1, 3, 16, 16]), &Tensor::zeros([1, 3, 32, 32]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
