//! Frozen feature networks for the feature-matching loss.
//!
//! The VGG-19 variant reproduces torchvision's `vgg19().features` up to a
//! chosen convolution and taps it before its ReLU. Weights are read from a
//! tensor archive with torchvision's `features.<index>.weight|bias` names
//! (`scripts/export_vgg19.py` writes one). A seeded random-weight network of
//! the same shape family is available when pretrained weights are not.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{join, set_requires_grad, Activation, ActivationLayer, Conv2d, Layer, MaxPool2d, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `0` marks a max-pool; other entries are 3×3 convolution widths.
pub const VGG19_LAYOUT: [usize; 20] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512];

/// Convolution `conv4_4`, the last convolution of the fourth block.
pub const VGG19_DEFAULT_TAP: usize = 12;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSpec {
    /// Pretrained VGG-19 weights from an archive, tapped before the ReLU of
    /// the `tap`-th convolution (1-based).
    Vgg19 { weights: PathBuf, tap: usize },
    /// Seeded random weights in a small VGG-style layout, tapped after the last convolution.
    Random { seed: u64, widths: Vec<usize> },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::random(0)
    }
}

impl ExtractorSpec {
    /// `conv 16 → conv 16 → pool → conv 32`.
    pub fn random(seed: u64) -> Self {
        ExtractorSpec::Random { seed, widths: vec![16, 16, 0, 32] }
    }

    pub fn vgg19(weights: impl Into<PathBuf>) -> Self {
        ExtractorSpec::Vgg19 { weights: weights.into(), tap: VGG19_DEFAULT_TAP }
    }
}

#[derive(Debug, Clone)]
enum Stage<T> {
    Conv(Conv2d<T>),
    Relu(ActivationLayer<T>),
    Pool(MaxPool2d),
}

impl<T: Scalar> Stage<T> {
    fn layer(&self) -> &dyn Layer<T> {
        match self {
            Stage::Conv(l) => l,
            Stage::Relu(l) => l,
            Stage::Pool(l) => l,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            Stage::Conv(l) => l,
            Stage::Relu(l) => l,
            Stage::Pool(l) => l,
        }
    }
}

/// Feature network ψ with frozen weights; gradients flow to its input only.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    /// Torchvision-style index of every stage, used for weight names.
    stages: Vec<(usize, Stage<T>)>,
    normalize: bool,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        match spec {
            ExtractorSpec::Vgg19 { weights, tap } => Self::vgg19(weights, *tap),
            ExtractorSpec::Random { seed, widths } => Self::random(*seed, widths),
        }
    }

    /// Builds `layout` (widths, `0` = pool), stopping right after the `tap`-th convolution.
    fn build(layout: &[usize], tap: usize, mut make: impl FnMut(usize, usize, usize) -> Result<Conv2d<T>>) -> Result<Vec<(usize, Stage<T>)>> {
        let total = layout.iter().filter(|&&w| w > 0).count();
        if tap == 0 || tap > total {
            return Err(Error::Config(format!("feature tap {tap} outside 1..={total}")));
        }
        let mut stages = Vec::new();
        let (mut width, mut index, mut convs) = (3, 0, 0);
        for &w in layout {
            if w == 0 {
                stages.push((index, Stage::Pool(MaxPool2d::new())));
                index += 1;
                continue;
            }
            stages.push((index, Stage::Conv(make(index, width, w)?)));
            convs += 1;
            width = w;
            if convs == tap {
                break;
            }
            stages.push((index + 1, Stage::Relu(ActivationLayer::new(Activation::Relu))));
            index += 2;
        }
        Ok(stages)
    }

    pub fn random(seed: u64, widths: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tap = widths.iter().filter(|&&w| w > 0).count();
        let stages = Self::build(widths, tap, |_, cin, cout| Ok(Conv2d::new(cin, cout, 3, 1, 1).init(&mut rng)))?;
        let mut ex = Self { stages, normalize: false };
        set_requires_grad(&mut ex, false);
        Ok(ex)
    }

    pub fn vgg19(weights: &Path, tap: usize) -> Result<Self> {
        if !weights.exists() {
            return Err(Error::Dependency {
                what: format!("VGG-19 weights at {}", weights.display()),
                hint: "export them with `python3 scripts/export_vgg19.py <out.penh>` (needs torchvision \
                       with cached ImageNet weights), or select the random-feature extractor"
                    .into(),
            });
        }
        let archive = Archive::load(weights)?;
        let stages = Self::build(&VGG19_LAYOUT, tap, |index, cin, cout| {
            let mut conv = Conv2d::new(cin, cout, 3, 1, 1);
            for (suffix, param) in [("weight", &mut conv.weight), ("bias", &mut conv.bias)] {
                let name = format!("features.{index}.{suffix}");
                let (shape, data) = archive
                    .get::<T>(&name)
                    .ok_or_else(|| Error::format(weights, format!("missing tensor {name}")))?;
                if shape != param.shape {
                    return Err(Error::format(weights, format!("{name} has shape {shape:?}, expected {:?}", param.shape)));
                }
                param.data = data;
            }
            Ok(conv)
        })?;
        let mut ex = Self { stages, normalize: true };
        set_requires_grad(&mut ex, false);
        Ok(ex)
    }

    /// Writes the convolution weights under torchvision names.
    pub fn to_archive(&self) -> Archive {
        let mut archive = Archive::new(serde_json::json!({"kind": "feature_extractor"}));
        for (name, p) in crate::nn::named_params(self) {
            archive.insert(&name, &p.shape, &p.data);
        }
        archive
    }

    fn normalize_input(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.normalize {
            return x.clone();
        }
        let plane = x.height() * x.width();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("feature extractor expects RGB input, got {} channels", x.channels())));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for FeatureExtractor<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = self.normalize_input(x);
        for (_, stage) in &self.stages {
            h = stage.layer().forward(&h)?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = self.normalize_input(x);
        for (_, stage) in &mut self.stages {
            h = stage.layer_mut().forward_train(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for (_, stage) in self.stages.iter_mut().rev() {
            d = stage.layer_mut().backward(&d)?;
        }
        if self.normalize {
            let plane = d.height() * d.width();
            for (i, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                let s = T::lit(IMAGENET_STD[i % 3]);
                chunk.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(d)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (index, stage) in &self.stages {
            stage.layer().visit_params(&join(prefix, &format!("features.{index}")), f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        for (index, stage) in &mut self.stages {
            stage.layer_mut().visit_params_mut(&join(prefix, &format!("features.{index}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::named_params;

    #[test]
    fn vgg_names_follow_torchvision_indices() {
        let stages = FeatureExtractor::<f32>::build(&VGG19_LAYOUT, VGG19_DEFAULT_TAP, |_, cin, cout| {
            Ok(Conv2d::new(cin, cout, 3, 1, 1))
        })
        .unwrap();
        let ex = FeatureExtractor { stages, normalize: true };
        let names: Vec<_> = named_params(&ex).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "features.0.weight");
        // conv4_4 is torchvision's features.25
        assert_eq!(names.last().unwrap(), "features.25.bias");
        assert_eq!(names.len(), 24);
    }

    #[test]
    fn missing_weights_is_dependency_error() {
        let err = FeatureExtractor::<f32>::from_spec(&ExtractorSpec::vgg19("/nonexistent/vgg19.penh")).unwrap_err();
        assert!(matches!(err, Error::Dependency { .. }));
        assert!(err.to_string().contains("export_vgg19"));
    }

    #[test]
    fn weights_roundtrip_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        // a random extractor in the full VGG layout, saved and reloaded as "pretrained"
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stages = FeatureExtractor::<f32>::build(&VGG19_LAYOUT, 2, |_, cin, cout| {
            Ok(Conv2d::new(cin, cout, 3, 1, 1).init(&mut rng))
        })
        .unwrap();
        let ex = FeatureExtractor { stages, normalize: true };
        let path = dir.path().join("vgg.penh");
        ex.to_archive().save(&path).unwrap();
        let loaded = FeatureExtractor::<f32>::vgg19(&path, 2).unwrap();
        let x = Tensor::full([1, 3, 8, 8], 0.5f32);
        assert_eq!(ex.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        assert_eq!(crate::nn::count_params(&loaded), 0);
    }

    #[test]
    fn random_extractor_shape() {
        let ex = FeatureExtractor::<f64>::from_spec(&ExtractorSpec::random(3)).unwrap();
        let y = ex.forward(&Tensor::full([2, 3, 16, 16], 0.2)).unwrap();
        assert_eq!(y.shape(), [2, 32, 8, 8]);
    }
}
