//! Multi-term perceptual objective.
//!
//! `l_p = l_r + l_rfl + λ_G · l_g` where
//!
//! * `l_r` is the mean absolute error between output and reference,
//! * `l_rfl = λ_feat · mean|ψ(reference) − ψ(output)| + λ_TV · TV(output)`,
//! * `l_g = mean(−ln D(output, reference))`.
//!
//! Every `*_grad` function returns the gradient of its loss with respect to
//! the first (generated) argument.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::nn::Layer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_feat: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_g: 1e-4, lambda_feat: 1.0, lambda_tv: 2e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_feat", self.lambda_feat), ("lambda_tv", self.lambda_tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_rfl: f64,
    pub l_g: f64,
    pub l_p: f64,
}

impl LossBreakdown {
    /// Combines the terms; `l_p` is computed here and nowhere else.
    pub fn combine(l_r: f64, l_rfl: f64, l_g: f64, lambda_g: f64) -> Self {
        Self { l_r, l_rfl, l_g, l_p: l_r + l_rfl + lambda_g * l_g }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_rfl, self.l_g, self.l_p].iter().all(|v| v.is_finite())
    }

    pub fn max_term(&self) -> f64 {
        [self.l_r, self.l_rfl, self.l_g, self.l_p].into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l_r={:.6} l_rfl={:.6} l_g={:.6} l_p={:.6}", self.l_r, self.l_rfl, self.l_g, self.l_p)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Neumaier-compensated sum in `f64`.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn compensated_mean<T: Scalar>(values: impl Iterator<Item = T>, n: usize) -> T {
    T::lit(compensated_sum(values.map(|v| v.as_f64())) / n.max(1) as f64)
}

/// Mean absolute difference over every element.
pub fn reconstruction_loss<T: Scalar>(output: &Tensor<T>, reference: &Tensor<T>) -> Result<T> {
    same_shape(output, reference, "reconstruction loss")?;
    let diffs = output.data().iter().zip(reference.data()).map(|(&a, &b)| (a - b).abs());
    Ok(compensated_mean(diffs, output.len()))
}

pub fn reconstruction_grad<T: Scalar>(output: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::lit(output.len() as f64);
    output.zip_map(reference, |a, b| sign(a - b) / n)
}

/// Anisotropic total variation: per-image sum of absolute horizontal and
/// vertical neighbour differences, averaged over the batch.
pub fn total_variation<T: Scalar>(x: &Tensor<T>) -> T {
    let [n, c, h, w] = x.shape();
    let diffs = x.data().chunks_exact(h * w).take(n * c).flat_map(|plane| {
        (0..h * w).flat_map(move |i| {
            let (y, xx) = (i / w, i % w);
            let right = (xx + 1 < w).then(|| (plane[i + 1] - plane[i]).abs());
            let down = (y + 1 < h).then(|| (plane[i + w] - plane[i]).abs());
            right.into_iter().chain(down)
        })
    });
    compensated_mean(diffs, n)
}

pub fn total_variation_grad<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let scale = T::one() / T::lit(n.max(1) as f64);
    let mut g = Tensor::zeros(x.shape());
    for (plane, gp) in x.data().chunks_exact(h * w).zip(g.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    let s = sign(plane[i + 1] - plane[i]) * scale;
                    gp[i + 1] += s;
                    gp[i] -= s;
                }
                if y + 1 < h {
                    let s = sign(plane[i + w] - plane[i]) * scale;
                    gp[i + w] += s;
                    gp[i] -= s;
                }
            }
        }
    }
    g
}

/// Feature-normalized L1 distance `mean|ψ(a) − ψ(b)|`.
pub fn feature_distance<T: Scalar>(extractor: &FeatureExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    same_shape(a, b, "feature loss")?;
    reconstruction_loss(&extractor.forward(a)?, &extractor.forward(b)?)
}

/// Regularized feature term: `λ_feat · mean|ψ(reference) − ψ(output)| + λ_TV · TV(output)`.
pub fn feature_loss<T: Scalar>(
    output: &Tensor<T>,
    reference: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<T> {
    let dist = if weights.lambda_feat > 0.0 {
        T::lit(weights.lambda_feat) * feature_distance(extractor, output, reference)?
    } else {
        same_shape(output, reference, "feature loss")?;
        T::zero()
    };
    Ok(dist + T::lit(weights.lambda_tv) * total_variation(output))
}

/// Value and output-gradient of [`feature_loss`].
pub fn feature_loss_grad<T: Scalar>(
    output: &Tensor<T>,
    reference: &Tensor<T>,
    extractor: &mut FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<(T, Tensor<T>)> {
    same_shape(output, reference, "feature loss")?;
    let mut grad = total_variation_grad(output);
    grad.scale(T::lit(weights.lambda_tv));
    let mut value = T::lit(weights.lambda_tv) * total_variation(output);
    if weights.lambda_feat > 0.0 {
        let target = extractor.forward(reference)?;
        let feats = extractor.forward_train(output)?;
        value += T::lit(weights.lambda_feat) * reconstruction_loss(&feats, &target)?;
        let mut df = reconstruction_grad(&feats, &target)?;
        df.scale(T::lit(weights.lambda_feat));
        grad.add_assign(&extractor.backward(&df)?)?;
    }
    Ok((value, grad))
}

#[inline]
fn neg_log<T: Scalar>(p: T) -> T {
    -(p.max(T::lit(LOG_FLOOR))).ln()
}

#[inline]
fn neg_log_grad<T: Scalar>(p: T) -> T {
    if p > T::lit(LOG_FLOOR) {
        -T::one() / p
    } else {
        T::zero()
    }
}

/// `mean(−ln D(output, reference))` over the score map.
pub fn adversarial_generator_loss<T: Scalar>(scores: &Tensor<T>) -> T {
    compensated_mean(scores.data().iter().map(|&s| neg_log(s)), scores.len())
}

/// Gradient of [`adversarial_generator_loss`] with respect to the scores.
pub fn adversarial_generator_grad<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(scores.len().max(1) as f64);
    scores.map(|s| neg_log_grad(s) / n)
}

/// `mean(−ln real) + mean(−ln(1 − fake))`.
pub fn discriminator_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> T {
    let real_term = compensated_mean(real.data().iter().map(|&s| neg_log(s)), real.len());
    let fake_term = compensated_mean(fake.data().iter().map(|&s| neg_log(T::one() - s)), fake.len());
    real_term + fake_term
}

/// Gradients of [`discriminator_loss`] with respect to the real and fake score maps.
pub fn discriminator_loss_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let nr = T::lit(real.len().max(1) as f64);
    let nf = T::lit(fake.len().max(1) as f64);
    (real.map(|s| neg_log_grad(s) / nr), fake.map(|s| -neg_log_grad(T::one() - s) / nf))
}

/// Assembles the breakdown from already computed terms.
pub fn perceptual_loss(l_r: f64, l_rfl: f64, l_g: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown::combine(l_r, l_rfl, l_g, weights.lambda_g)
}

/// Networks that score a generated batch. `None` disables the matching term.
pub struct Critics<'a, T> {
    pub extractor: Option<&'a mut FeatureExtractor<T>>,
    pub discriminator: Option<&'a mut Discriminator<T>>,
}

/// Full objective for a generated batch, without gradients.
pub fn perceptual_objective<T: Scalar>(
    output: &Tensor<T>,
    reference: &Tensor<T>,
    weights: &LossWeights,
    extractor: Option<&FeatureExtractor<T>>,
    discriminator: Option<&Discriminator<T>>,
) -> Result<LossBreakdown> {
    let l_r = reconstruction_loss(output, reference)?.as_f64();
    let l_rfl = match extractor {
        Some(ex) => feature_loss(output, reference, ex, weights)?.as_f64(),
        None => 0.0,
    };
    let l_g = match discriminator {
        Some(d) => adversarial_generator_loss(&d.score(output, reference)?).as_f64(),
        None => 0.0,
    };
    Ok(perceptual_loss(l_r, l_rfl, l_g, weights))
}

/// Full objective and its gradient with respect to `output`.
///
/// Backpropagating through the discriminator accumulates into its parameter
/// gradients; callers zero them before the next discriminator update.
pub fn perceptual_objective_grad<T: Scalar>(
    output: &Tensor<T>,
    reference: &Tensor<T>,
    weights: &LossWeights,
    critics: Critics<'_, T>,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let l_r = reconstruction_loss(output, reference)?.as_f64();
    let mut grad = reconstruction_grad(output, reference)?;
    let mut l_rfl = 0.0;
    if let Some(ex) = critics.extractor {
        let (v, g) = feature_loss_grad(output, reference, ex, weights)?;
        l_rfl = v.as_f64();
        grad.add_assign(&g)?;
    }
    let mut l_g = 0.0;
    if let Some(d) = critics.discriminator {
        let scores = d.score_train(output, reference)?;
        l_g = adversarial_generator_loss(&scores).as_f64();
        if weights.lambda_g > 0.0 {
            let mut ds = adversarial_generator_grad(&scores);
            ds.scale(T::lit(weights.lambda_g));
            grad.add_assign(&d.backward_candidate(&ds)?)?;
        } else {
            d.backward_candidate(&Tensor::zeros(scores.shape()))?;
        }
    }
    Ok((perceptual_loss(l_r, l_rfl, l_g, weights), grad))
}
