//! Medical image enhancement: degradation synthesis, a gated residual
//! encoder-decoder trained against a perceptual objective, and evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod archive;
pub mod checkpoint;
pub mod colorimetry;
pub mod dataset;
pub mod degrade;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint};
pub use colorimetry::{load_image, rgb_to_lab, save_image, ImageTensor, LabScale, LabTensor};
pub use dataset::{build_manifest, split_manifest, Category, PairManifest, Split, SplitStrategy};
pub use degrade::{degrade, degrade_corpus, DegradeConfig, DegradeMode, DegradeOutcome};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use extractor::{ExtractorSpec, FeatureExtractor};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{bench_inference, delta_e, evaluate, psnr, BenchReport, DeltaEFormula, MetricReport};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use trainer::{fit, train_step, NetVariant, TrainConfig, TrainState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Generator32 = Generator<f32>;
pub type Generator64 = Generator<f64>;
pub type Discriminator32 = Discriminator<f32>;
pub type Discriminator64 = Discriminator<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
