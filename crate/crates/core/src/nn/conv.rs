use rand::Rng;
use rayon::prelude::*;

use super::{init_uniform, join, Layer, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on the im2col buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

/// Geometry of a direct convolution from `c×h×w` to `?×oh×ow`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, oh, ow })
    }

    #[inline]
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.rows_per_chunk();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r0| (r0, (r0 + step).min(oh)))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds output rows `r0..r1` into a `patch × ((r1 - r0)·ow)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geom, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let n = (r1 - r0) * g.ow;
    cols.clear();
    cols.resize(g.patch() * n, T::zero());
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = (oy - r0) * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the columns back into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, r0: usize, r1: usize, x: &mut [T]) {
    let n = (r1 - r0) * g.ow;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = (oy - r0) * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn bias_grad<T: Scalar>(dy: &[T], plane: usize) -> Vec<T> {
    dy.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect()
}

/// Per-sample gradient contributions, reduced in sample order for determinism.
struct SampleGrads<T> {
    dx: Vec<T>,
    dw: Option<Vec<T>>,
    db: Option<Vec<T>>,
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized layer.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0);
        Self {
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    /// `U(±1/sqrt(fan_in))` for weights and bias.
    pub fn init<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let bound = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        init_uniform(&mut self.weight, bound, rng);
        init_uniform(&mut self.bias, bound, rng);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }
    pub fn out_channels(&self) -> usize {
        self.out_ch
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn padding(&self) -> usize {
        self.pad
    }

    fn geom(&self, x: &Tensor<T>) -> Result<Geom> {
        let [_, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        Geom::new(c, h, w, self.kernel, self.stride, self.pad).ok_or_else(|| {
            Error::Shape(format!("{h}x{w} input is smaller than the {0}x{0} kernel", self.kernel))
        })
    }

    fn forward_sample(&self, x: &[T], g: &Geom, out: &mut [T]) {
        let plane = g.oh * g.ow;
        let patch = g.patch();
        let w = &self.weight.data;
        if g.is_pointwise() {
            T::gemm(self.out_ch, patch, plane, T::one(), w, (patch as isize, 1), x, (plane as isize, 1), T::zero(), out, (plane as isize, 1));
        } else {
            let mut cols = Vec::new();
            for (r0, r1) in g.chunks() {
                im2col(x, g, r0, r1, &mut cols);
                let n = (r1 - r0) * g.ow;
                T::gemm(
                    self.out_ch,
                    patch,
                    n,
                    T::one(),
                    w,
                    (patch as isize, 1),
                    &cols,
                    (n as isize, 1),
                    T::zero(),
                    &mut out[r0 * g.ow..],
                    (plane as isize, 1),
                );
            }
        }
        add_bias(out, &self.bias.data, plane);
    }

    fn backward_sample(&self, x: &[T], dy: &[T], g: &Geom) -> SampleGrads<T> {
        let plane = g.oh * g.ow;
        let patch = g.patch();
        let w = &self.weight.data;
        let want_w = self.weight.requires_grad;
        let mut dx = vec![T::zero(); g.c * g.h * g.w];
        let mut dw = want_w.then(|| vec![T::zero(); self.out_ch * patch]);
        if g.is_pointwise() {
            T::gemm(patch, self.out_ch, plane, T::one(), w, (1, patch as isize), dy, (plane as isize, 1), T::zero(), &mut dx, (plane as isize, 1));
            if let Some(dw) = dw.as_mut() {
                T::gemm(self.out_ch, plane, patch, T::one(), dy, (plane as isize, 1), x, (1, plane as isize), T::zero(), dw, (patch as isize, 1));
            }
        } else {
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (r0, r1) in g.chunks() {
                let n = (r1 - r0) * g.ow;
                let dy_chunk = &dy[r0 * g.ow..];
                if let Some(dw) = dw.as_mut() {
                    im2col(x, g, r0, r1, &mut cols);
                    T::gemm(self.out_ch, n, patch, T::one(), dy_chunk, (plane as isize, 1), &cols, (1, n as isize), T::one(), dw, (patch as isize, 1));
                }
                dcols.clear();
                dcols.resize(patch * n, T::zero());
                T::gemm(patch, self.out_ch, n, T::one(), w, (1, patch as isize), dy_chunk, (plane as isize, 1), T::zero(), &mut dcols, (n as isize, 1));
                col2im(&dcols, g, r0, r1, &mut dx);
            }
        }
        let db = self.bias.requires_grad.then(|| bias_grad(dy, plane));
        SampleGrads { dx, dw, db }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let n = x.batch();
        let mut out = Tensor::zeros([n, self.out_ch, g.oh, g.ow]);
        let plane = self.out_ch * g.oh * g.ow;
        out.data_mut()
            .par_chunks_mut(plane.max(1))
            .enumerate()
            .for_each(|(i, o)| self.forward_sample(x.sample(i), &g, o));
        Ok(out)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| Error::Shape("conv backward without forward_train".into()))?;
        let g = self.geom(&x)?;
        dy.expect_shape([x.batch(), self.out_ch, g.oh, g.ow], "conv backward")?;
        let grads: Vec<SampleGrads<T>> = (0..x.batch())
            .into_par_iter()
            .map(|i| self.backward_sample(x.sample(i), dy.sample(i), &g))
            .collect();
        let mut dx = Vec::with_capacity(x.len());
        for s in grads {
            dx.extend_from_slice(&s.dx);
            if let Some(dw) = &s.dw {
                accumulate(&mut self.weight.grad, dw);
            }
            if let Some(db) = &s.db {
                accumulate(&mut self.bias.grad, db);
            }
        }
        Tensor::from_vec(x.shape(), dx)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution (fractionally strided), weight layout `[in, out, k, k]`.
///
/// Output size is `(h - 1)·stride - 2·pad + k + output_pad`; with `k = 3`,
/// `stride = 2`, `pad = 1`, `output_pad = 1` it exactly doubles `h` and `w`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0 && output_pad < stride);
        Self {
            weight: Param::zeros(&[in_ch, out_ch, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    /// Factor-2 upsampler: 3×3 kernel, stride 2, padding 1, output padding 1.
    pub fn doubling(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 3, 2, 1, 1)
    }

    pub fn init<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let bound = 1.0 / ((self.out_ch * self.kernel * self.kernel) as f64).sqrt();
        init_uniform(&mut self.weight, bound, rng);
        init_uniform(&mut self.bias, bound, rng);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }
    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    /// Geometry of the adjoint direct convolution, mapping output → input.
    fn geom(&self, x: &Tensor<T>) -> Result<Geom> {
        let [_, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "transposed convolution expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let oh = (h - 1) * self.stride + self.kernel + self.output_pad;
        let ow = (w - 1) * self.stride + self.kernel + self.output_pad;
        if oh < 2 * self.pad + 1 || ow < 2 * self.pad + 1 {
            return Err(Error::Shape(format!("{h}x{w} input too small for transposed convolution")));
        }
        let g = Geom::new(self.out_ch, oh - 2 * self.pad, ow - 2 * self.pad, self.kernel, self.stride, self.pad)
            .ok_or_else(|| Error::Shape(format!("{h}x{w} input too small for transposed convolution")))?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(g)
    }

    fn forward_sample(&self, x: &[T], g: &Geom, out: &mut [T]) {
        let in_plane = g.oh * g.ow;
        let patch = g.patch();
        let mut cols = Vec::new();
        for (r0, r1) in g.chunks() {
            let n = (r1 - r0) * g.ow;
            cols.clear();
            cols.resize(patch * n, T::zero());
            T::gemm(patch, self.in_ch, n, T::one(), &self.weight.data, (1, patch as isize), &x[r0 * g.ow..], (in_plane as isize, 1), T::zero(), &mut cols, (n as isize, 1));
            col2im(&cols, g, r0, r1, out);
        }
        add_bias(out, &self.bias.data, g.h * g.w);
    }

    fn backward_sample(&self, x: &[T], dy: &[T], g: &Geom) -> SampleGrads<T> {
        let in_plane = g.oh * g.ow;
        let patch = g.patch();
        let mut dx = vec![T::zero(); self.in_ch * in_plane];
        let mut dw = self.weight.requires_grad.then(|| vec![T::zero(); self.in_ch * patch]);
        let mut cols = Vec::new();
        for (r0, r1) in g.chunks() {
            let n = (r1 - r0) * g.ow;
            im2col(dy, g, r0, r1, &mut cols);
            T::gemm(self.in_ch, patch, n, T::one(), &self.weight.data, (patch as isize, 1), &cols, (n as isize, 1), T::zero(), &mut dx[r0 * g.ow..], (in_plane as isize, 1));
            if let Some(dw) = dw.as_mut() {
                T::gemm(self.in_ch, n, patch, T::one(), &x[r0 * g.ow..], (in_plane as isize, 1), &cols, (1, n as isize), T::one(), dw, (patch as isize, 1));
            }
        }
        let db = self.bias.requires_grad.then(|| bias_grad(dy, g.h * g.w));
        SampleGrads { dx, dw, db }
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let n = x.batch();
        let mut out = Tensor::zeros([n, self.out_ch, g.h, g.w]);
        let plane = self.out_ch * g.h * g.w;
        out.data_mut()
            .par_chunks_mut(plane.max(1))
            .enumerate()
            .for_each(|(i, o)| self.forward_sample(x.sample(i), &g, o));
        Ok(out)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("transposed conv backward without forward_train".into()))?;
        let g = self.geom(&x)?;
        dy.expect_shape([x.batch(), self.out_ch, g.h, g.w], "transposed conv backward")?;
        let grads: Vec<SampleGrads<T>> = (0..x.batch())
            .into_par_iter()
            .map(|i| self.backward_sample(x.sample(i), dy.sample(i), &g))
            .collect();
        let mut dx = Vec::with_capacity(x.len());
        for s in grads {
            dx.extend_from_slice(&s.dx);
            if let Some(dw) = &s.dw {
                accumulate(&mut self.weight.grad, dw);
            }
            if let Some(db) = &s.db {
                accumulate(&mut self.bias.grad, db);
            }
        }
        Tensor::from_vec(x.shape(), dx)
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
