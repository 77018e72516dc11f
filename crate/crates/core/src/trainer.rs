//! Alternating discriminator/generator optimization.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::colorimetry::{images_to_batch, load_image, ImageTensor};
use crate::dataset::{resize_bilinear, PairBatch, PairManifest, Split};
use crate::degrade::image_seed;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorSpec, FeatureExtractor};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{discriminator_loss, discriminator_loss_grad, perceptual_objective_grad, Critics, LossBreakdown, LossWeights};
use crate::nn::{named_params, zero_grads, Layer};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

/// Any loss above this (or non-finite) aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Network and objective toggles of the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetVariant {
    pub use_residual_blocks: bool,
    pub use_gates: bool,
    pub use_feature_loss: bool,
    pub use_adversarial: bool,
}

impl NetVariant {
    pub const BASE: Self = Self { use_residual_blocks: false, use_gates: false, use_feature_loss: false, use_adversarial: false };
    pub const RES: Self = Self { use_residual_blocks: true, ..Self::BASE };
    pub const RES_GATE: Self = Self { use_gates: true, ..Self::RES };
    pub const RES_GATE_RFL: Self = Self { use_feature_loss: true, ..Self::RES_GATE };
    pub const FULL: Self = Self { use_adversarial: true, ..Self::RES_GATE_RFL };

    /// The five ablation rows, from the plain L1 baseline to the full model.
    pub const ABLATIONS: [(&'static str, Self); 5] = [
        ("base", Self::BASE),
        ("res", Self::RES),
        ("res-gate", Self::RES_GATE),
        ("res-gate-rfl", Self::RES_GATE_RFL),
        ("full", Self::FULL),
    ];

    pub fn name(&self) -> Option<&'static str> {
        Self::ABLATIONS.iter().find(|(_, v)| v == self).map(|(n, _)| *n)
    }
}

impl Default for NetVariant {
    fn default() -> Self {
        Self::FULL
    }
}

impl FromStr for NetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ABLATIONS
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected base, res, res-gate, res-gate-rfl or full)")))
    }
}

impl fmt::Display for NetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "{self:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_side: usize,
    pub weights: LossWeights,
    pub variant: NetVariant,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub depth_schedule: Vec<usize>,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorSpec,
    /// Run on a single worker thread.
    pub deterministic: bool,
    /// Stop after this many steps in total, if set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            epochs: 100,
            batch_size: 24,
            crop_side: 128,
            weights: LossWeights::default(),
            variant: NetVariant::FULL,
            seed: 0,
            checkpoint_every: 1000,
            depth_schedule: GeneratorConfig::default().depth_schedule,
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorSpec::default(),
            deterministic: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let multiple = 1 << self.depth_schedule.len();
        if self.crop_side == 0 || !self.crop_side.is_multiple_of(multiple) || !self.crop_side.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "crop_side {} must be a positive multiple of {}",
                self.crop_side,
                multiple.max(16)
            )));
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            depth_schedule: self.depth_schedule.clone(),
            use_residual_blocks: self.variant.use_residual_blocks,
            use_gates: self.variant.use_gates,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Seed for an independent stream; constructing one component never
    /// shifts the random numbers another one sees.
    pub fn stream_seed(&self, stream: &str) -> u64 {
        image_seed(self.seed, stream)
    }
}

/// Everything mutated by training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub extractor: Option<FeatureExtractor<T>>,
    pub opt_g: Adam<T>,
    pub opt_d: Option<Adam<T>>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config(), config.stream_seed("generator"))?;
        let discriminator = if config.variant.use_adversarial {
            Some(Discriminator::new(config.discriminator.clone(), config.stream_seed("discriminator"))?)
        } else {
            None
        };
        let extractor = if config.variant.use_feature_loss {
            Some(FeatureExtractor::from_spec(&config.extractor)?)
        } else {
            None
        };
        let opt_g = Adam::new(config.adam(), &generator);
        let opt_d = discriminator.as_ref().map(|d| Adam::new(config.adam(), d));
        Ok(Self { config, generator, discriminator, extractor, opt_g, opt_d, step: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    /// `None` when the adversarial term is disabled.
    pub d_loss: Option<f64>,
}

fn check_divergence(step: u64, losses: LossBreakdown, d_loss: Option<f64>) -> Result<()> {
    let d_ok = d_loss.is_none_or(|d| d.is_finite() && d <= DIVERGENCE_LIMIT);
    if !losses.is_finite() || losses.max_term() > DIVERGENCE_LIMIT || !d_ok {
        return Err(Error::Divergence { step, breakdown: losses });
    }
    Ok(())
}

fn all_finite<T: Scalar, L: Layer<T>>(layer: &L) -> bool {
    named_params(layer).iter().all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
}

/// One discriminator update on (reference, reference) as real and
/// (generated, reference) as fake. Returns `None` when the adversarial term is off.
pub fn discriminator_step<T: Scalar>(state: &mut TrainState<T>, batch: &PairBatch<T>) -> Result<Option<f64>> {
    if !state.config.variant.use_adversarial {
        return Ok(None);
    }
    let (Some(d), Some(opt_d)) = (state.discriminator.as_mut(), state.opt_d.as_mut()) else {
        return Err(Error::Config("adversarial variant without a discriminator".into()));
    };
    let fake = state.generator.forward(&batch.degraded)?;
    zero_grads(d);
    let real_scores = d.score_train(&batch.reference, &batch.reference)?;
    let (g_real, _) = discriminator_loss_grad(&real_scores, &real_scores);
    d.backward(&g_real)?;
    let fake_scores = d.score_train(&fake, &batch.reference)?;
    let (_, g_fake) = discriminator_loss_grad(&real_scores, &fake_scores);
    d.backward(&g_fake)?;
    let loss = discriminator_loss(&real_scores, &fake_scores).as_f64();
    opt_d.update(d);
    zero_grads(d);
    Ok(Some(loss))
}

/// One generator update on the perceptual objective. Checks for divergence
/// before touching any weight.
pub fn generator_step<T: Scalar>(state: &mut TrainState<T>, batch: &PairBatch<T>, d_loss: Option<f64>) -> Result<LossBreakdown> {
    let step = state.step + 1;
    let variant = state.config.variant;
    zero_grads(&mut state.generator);
    let output = state.generator.forward_train(&batch.degraded)?;
    let critics = Critics {
        extractor: state.extractor.as_mut().filter(|_| variant.use_feature_loss),
        discriminator: state.discriminator.as_mut().filter(|_| variant.use_adversarial),
    };
    let (losses, grad) = perceptual_objective_grad(&output, &batch.reference, &state.config.weights, critics)?;
    check_divergence(step, losses, d_loss)?;
    state.generator.backward(&grad)?;
    state.opt_g.update(&mut state.generator);
    if let Some(d) = state.discriminator.as_mut() {
        // backpropagating through D left gradients behind
        zero_grads(d);
    }
    Ok(losses)
}

/// One discriminator update followed by one generator update.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &PairBatch<T>) -> Result<StepReport> {
    let d_loss = discriminator_step(state, batch)?;
    let losses = generator_step(state, batch, d_loss)?;
    let step = state.step + 1;
    if !all_finite(&state.generator) || !state.discriminator.as_ref().is_none_or(all_finite) {
        return Err(Error::Divergence { step, breakdown: losses });
    }
    state.step = step;
    Ok(StepReport { step, losses, d_loss })
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_r: f64,
    pub l_rfl: f64,
    pub l_g: f64,
    pub l_p: f64,
    pub d_loss: Option<f64>,
    pub wallclock: f64,
}

impl LogRow {
    /// Row without the wall-clock column, for reproducibility comparisons.
    pub fn losses(&self) -> (u64, f64, f64, f64, f64, Option<f64>) {
        (self.step, self.l_r, self.l_rfl, self.l_g, self.l_p, self.d_loss)
    }
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.penh";

#[derive(Debug)]
pub struct FitOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Steps per epoch: every training pair once, the last batch possibly short.
pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> u64 {
    train_len.div_ceil(batch_size) as u64
}

/// Order of the training indices in `epoch`, a pure function of (seed, epoch).
pub fn epoch_order(train: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, &format!("epoch-{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Decoded training pairs, resized once.
struct PairCache<T> {
    side: usize,
    pairs: HashMap<usize, (ImageTensor<T>, ImageTensor<T>)>,
    limit: usize,
}

impl<T: Scalar> PairCache<T> {
    fn batch(&mut self, manifest: &PairManifest, indices: &[usize]) -> Result<PairBatch<T>> {
        let mut degraded = Vec::with_capacity(indices.len());
        let mut reference = Vec::with_capacity(indices.len());
        for &i in indices {
            let pair = match self.pairs.get(&i) {
                Some(p) => p.clone(),
                None => {
                    let e = &manifest.entries[i];
                    let d = resize_bilinear(&load_image::<T>(&e.degraded_path)?, self.side, self.side);
                    let r = resize_bilinear(&load_image::<T>(&e.reference_path)?, self.side, self.side);
                    if self.pairs.len() < self.limit {
                        self.pairs.insert(i, (d.clone(), r.clone()));
                    }
                    (d, r)
                }
            };
            degraded.push(pair.0);
            reference.push(pair.1);
        }
        Ok(PairBatch { degraded: images_to_batch(&degraded)?, reference: images_to_batch(&reference)? })
    }
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.penh"))
}

/// Trains for `config.epochs` passes over the train split (or `max_steps`).
///
/// Continues from `resume` when given. With an output directory, writes
/// `train_log.csv`, periodic `checkpoints/step_XXXXXXXX.penh` and `final.penh`.
/// A divergence aborts without touching checkpoints already written.
pub fn fit<T: Scalar>(
    config: &TrainConfig,
    manifest: &PairManifest,
    out_dir: Option<&Path>,
    resume: Option<TrainState<T>>,
) -> Result<FitOutcome<T>> {
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| fit_inner(config, manifest, out_dir, resume))
    } else {
        fit_inner(config, manifest, out_dir, resume)
    }
}

fn fit_inner<T: Scalar>(
    config: &TrainConfig,
    manifest: &PairManifest,
    out_dir: Option<&Path>,
    resume: Option<TrainState<T>>,
) -> Result<FitOutcome<T>> {
    let train = manifest.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyCorpus("manifest has no training pairs".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config.clone())?,
    };
    let per_epoch = steps_per_epoch(train.len(), config.batch_size);
    let mut total = per_epoch * config.epochs as u64;
    if let Some(max) = config.max_steps {
        total = total.min(max);
    }

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let appending = state.step > 0 && path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(appending)
                .write(true)
                .truncate(!appending)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(csv::WriterBuilder::new().has_headers(!appending).from_writer(file))
        }
        None => None,
    };

    let mut cache = PairCache { side: config.crop_side, pairs: HashMap::new(), limit: 4096 };
    let started = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();

    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(&train, config.seed, epoch);
            order_epoch = epoch;
        }
        let b = (state.step % per_epoch) as usize;
        let indices = &order[b * config.batch_size..((b + 1) * config.batch_size).min(order.len())];
        let batch = cache.batch(manifest, indices)?;
        let report = train_step(&mut state, &batch)?;
        let row = LogRow {
            step: report.step,
            l_r: report.losses.l_r,
            l_rfl: report.losses.l_rfl,
            l_g: report.losses.l_g,
            l_p: report.losses.l_p,
            d_loss: report.d_loss,
            wallclock: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row).map_err(|e| Error::Config(format!("cannot write training log: {e}")))?;
            w.flush().map_err(|e| Error::io(TRAIN_LOG_FILE, e))?;
        }
        log.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, state.step);
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&state, &path)?;
        checkpoints.push(path);
    }
    Ok(FitOutcome { state, log, checkpoints })
}

/// Most recent periodic checkpoint in a training directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "penh"))
        .collect();
    found.sort();
    found.pop()
}

/// Reads a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| Error::format(path, e))).collect()
}
