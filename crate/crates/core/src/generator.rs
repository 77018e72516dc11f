//! Fully convolutional gated residual encoder-decoder.
//!
//! Wiring for a depth schedule `c_0 … c_{L-1}` (default `64, 96, 128, 196`):
//!
//! ```text
//! input   conv3x3 3 → c_0
//! enc i   block(c_i) ─────────────── skip_i (c_i @ H/2^i)
//!         down_i  conv3x3/s2  c_i → c_{i+1}      (c_L = c_{L-1})
//!         bottleneck: c_{L-1} @ H/2^L
//! dec i   up_i    convT3x3/s2 c_{i+1} → c_i      (i = L-1 … 0)
//!         + gate_i(skip_i)                        (identity skip without gates)
//!         block(c_i)
//! output  conv3x3 c_0 → 3, (tanh + 1) / 2
//! ```
//!
//! A block is `conv3x3 → PReLU → conv3x3`, plus its input when residual.
//! A gate is `LeakyReLU(W_a·x) ⊙ sigmoid(W_b·x)` with 1×1 `W_a`, `W_b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorimetry::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{count_params, join, leaky, leaky_derivative, sigmoid, Activation, ActivationLayer, Conv2d, ConvTranspose2d, Layer, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channel width of each encoder level; the first entry is the base width.
    pub depth_schedule: Vec<usize>,
    /// Plain double convolutions replace residual blocks when false.
    pub use_residual_blocks: bool,
    /// Identity skips replace feature gates when false.
    pub use_gates: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { depth_schedule: vec![64, 96, 128, 196], use_residual_blocks: true, use_gates: true }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_schedule.is_empty() || self.depth_schedule.contains(&0) {
            return Err(Error::Config(format!(
                "depth schedule {:?} must be non-empty with positive entries",
                self.depth_schedule
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.depth_schedule.len()
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels()
    }

    fn down_out(&self, level: usize) -> usize {
        let s = &self.depth_schedule;
        s[(level + 1).min(s.len() - 1)]
    }
}

/// `conv3x3 → PReLU → conv3x3`, optionally added to its input.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub act: ActivationLayer<T>,
    pub conv2: Conv2d<T>,
    pub residual: bool,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, residual: bool, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, 1).init(rng),
            act: ActivationLayer::new(Activation::PRelu),
            conv2: Conv2d::new(channels, channels, 3, 1, 1).init(rng),
            residual,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "residual block configured for {} channels received {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut y = self.conv2.forward(&self.act.forward(&self.conv1.forward(x)?)?)?;
        if self.residual {
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = self.conv1.forward_train(x)?;
        let h = self.act.forward_train(&h)?;
        let mut y = self.conv2.forward_train(&h)?;
        if self.residual {
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.conv2.backward(dy)?;
        let d = self.act.backward(&d)?;
        let mut dx = self.conv1.backward(&d)?;
        if self.residual {
            dx.add_assign(dy)?;
        }
        Ok(dx)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.act.visit_params(&join(prefix, "act"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.act.visit_params_mut(&join(prefix, "act"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}

/// Contextual feature gate: `LeakyReLU(W_a·x) ⊙ sigmoid(W_b·x)`.
#[derive(Debug, Clone)]
pub struct Gate<T> {
    pub feature: Conv2d<T>,
    pub mask: Conv2d<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Gate<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            feature: Conv2d::new(channels, channels, 1, 1, 0).init(rng),
            mask: Conv2d::new(channels, channels, 1, 1, 0).init(rng),
            cache: None,
        }
    }

    fn combine(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |a, b| leaky(a) * sigmoid(b))
    }
}

impl<T: Scalar> Layer<T> for Gate<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::combine(&self.feature.forward(x)?, &self.mask.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.feature.forward_train(x)?;
        let b = self.mask.forward_train(x)?;
        let y = Self::combine(&a, &b)?;
        self.cache = Some((a, b));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = self.cache.take().ok_or_else(|| Error::Shape("gate backward without forward_train".into()))?;
        let mut da = dy.clone();
        let mut db = dy.clone();
        for (i, (ga, gb)) in da.data_mut().iter_mut().zip(db.data_mut()).enumerate() {
            let (av, bv) = (a.data()[i], b.data()[i]);
            let s = sigmoid(bv);
            *ga *= leaky_derivative(av) * s;
            *gb *= leaky(av) * s * (T::one() - s);
        }
        let mut dx = self.feature.backward(&da)?;
        dx.add_assign(&self.mask.backward(&db)?)?;
        Ok(dx)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.feature.visit_params(&join(prefix, "feature"), f);
        self.mask.visit_params(&join(prefix, "mask"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.feature.visit_params_mut(&join(prefix, "feature"), f);
        self.mask.visit_params_mut(&join(prefix, "mask"), f);
    }
}

/// Encoder outputs consumed by the decoder.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub bottleneck: Tensor<T>,
    /// One feature map per level, shallowest first.
    pub skips: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: GeneratorConfig,
    pub input: Conv2d<T>,
    pub encoder: Vec<ResidualBlock<T>>,
    pub down: Vec<Conv2d<T>>,
    pub up: Vec<ConvTranspose2d<T>>,
    /// Empty when gates are disabled.
    pub gates: Vec<Gate<T>>,
    pub decoder: Vec<ResidualBlock<T>>,
    pub output: Conv2d<T>,
    out_act: ActivationLayer<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.depth_schedule.clone();
        let levels = s.len();
        let res = config.use_residual_blocks;
        let input = Conv2d::new(3, s[0], 3, 1, 1).init(&mut rng);
        let mut encoder = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for (i, &c) in s.iter().enumerate() {
            encoder.push(ResidualBlock::new(c, res, &mut rng));
            down.push(Conv2d::new(c, config.down_out(i), 3, 2, 1).init(&mut rng));
        }
        let up = (0..levels).map(|i| ConvTranspose2d::doubling(config.down_out(i), s[i]).init(&mut rng)).collect();
        let gates = if config.use_gates {
            s.iter().map(|&c| Gate::new(c, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let decoder = s.iter().map(|&c| ResidualBlock::new(c, res, &mut rng)).collect();
        let output = Conv2d::new(s[0], 3, 3, 1, 1).init(&mut rng);
        Ok(Self { config, input, encoder, down, up, gates, decoder, output, out_act: ActivationLayer::new(Activation::UnitTanh) })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        count_params(self)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.config.size_multiple();
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(Error::Shape(format!("generator expects 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have height and width divisible by {m}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Encoded<T>> {
        self.check_input(x)?;
        let mut h = self.input.forward(x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (block, down) in self.encoder.iter().zip(&self.down) {
            h = block.forward(&h)?;
            let next = down.forward(&h)?;
            skips.push(h);
            h = next;
        }
        Ok(Encoded { bottleneck: h, skips })
    }

    pub fn decode(&self, encoded: &Encoded<T>) -> Result<Tensor<T>> {
        let mut h = encoded.bottleneck.clone();
        for i in (0..self.decoder.len()).rev() {
            h = self.up[i].forward(&h)?;
            let skip = &encoded.skips[i];
            match self.gates.get(i) {
                Some(gate) => h.add_assign(&gate.forward(skip)?)?,
                None => h.add_assign(skip)?,
            }
            h = self.decoder[i].forward(&h)?;
        }
        self.out_act.forward(&self.output.forward(&h)?)
    }

    /// Full-resolution enhancement of one image of any size: reflection-pads
    /// to the next multiple of `2^levels`, runs the network, crops back.
    pub fn enhance(&self, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let m = self.config.size_multiple();
        let (h, w) = (img.height(), img.width());
        let padded = pad_reflect(&img.to_tensor(), h.div_ceil(m) * m, w.div_ceil(m) * m);
        let out = self.forward(&padded)?;
        let cropped = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| out.at([0, c, y, x]));
        ImageTensor::from_tensor(&cropped, 0)
    }
}

#[inline]
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mirror-pads the bottom and right edges (edge pixel not repeated).
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(height >= h && width >= w, "padding cannot shrink a tensor");
    Tensor::from_fn([n, c, height, width], |[b, ch, y, xx]| {
        x.at([b, ch, reflect_index(y, h), reflect_index(xx, w)])
    })
}

impl<T: Scalar> Layer<T> for Generator<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let levels = self.encoder.len();
        let mut h = self.input.forward_train(x)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.encoder[i].forward_train(&h)?;
            let next = self.down[i].forward_train(&h)?;
            skips.push(h);
            h = next;
        }
        for i in (0..levels).rev() {
            h = self.up[i].forward_train(&h)?;
            match self.gates.get_mut(i) {
                Some(gate) => h.add_assign(&gate.forward_train(&skips[i])?)?,
                None => h.add_assign(&skips[i])?,
            }
            h = self.decoder[i].forward_train(&h)?;
        }
        let out = self.output.forward_train(&h)?;
        self.out_act.forward_train(&out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let levels = self.encoder.len();
        let d = self.out_act.backward(dy)?;
        let mut d = self.output.backward(&d)?;
        let mut skip_grads = Vec::with_capacity(levels);
        for i in 0..levels {
            d = self.decoder[i].backward(&d)?;
            skip_grads.push(match self.gates.get_mut(i) {
                Some(gate) => gate.backward(&d)?,
                None => d.clone(),
            });
            d = self.up[i].backward(&d)?;
        }
        for i in (0..levels).rev() {
            d = self.down[i].backward(&d)?;
            d.add_assign(&skip_grads[i])?;
            d = self.encoder[i].backward(&d)?;
        }
        self.input.backward(&d)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.input.visit_params(&join(prefix, "input"), f);
        for i in 0..self.encoder.len() {
            self.encoder[i].visit_params(&join(prefix, &format!("encoder.{i}")), f);
            self.down[i].visit_params(&join(prefix, &format!("down.{i}")), f);
        }
        for i in 0..self.decoder.len() {
            self.up[i].visit_params(&join(prefix, &format!("up.{i}")), f);
            if let Some(g) = self.gates.get(i) {
                g.visit_params(&join(prefix, &format!("gate.{i}")), f);
            }
            self.decoder[i].visit_params(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.input.visit_params_mut(&join(prefix, "input"), f);
        for (i, (enc, down)) in self.encoder.iter_mut().zip(self.down.iter_mut()).enumerate() {
            enc.visit_params_mut(&join(prefix, &format!("encoder.{i}")), f);
            down.visit_params_mut(&join(prefix, &format!("down.{i}")), f);
        }
        let mut gates = self.gates.iter_mut();
        for (i, (up, dec)) in self.up.iter_mut().zip(self.decoder.iter_mut()).enumerate() {
            up.visit_params_mut(&join(prefix, &format!("up.{i}")), f);
            if let Some(g) = gates.next() {
                g.visit_params_mut(&join(prefix, &format!("gate.{i}")), f);
            }
            dec.visit_params_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}

/// Trainable scalar count of the network `config` describes.
pub fn param_count(config: &GeneratorConfig) -> Result<usize> {
    Ok(Generator::<f32>::new(config.clone(), 0)?.param_count())
}
