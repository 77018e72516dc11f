//! Raster image I/O and sRGB → CIELAB conversion (D65 white point).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image with interleaved `H×W×3` samples in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    /// Validating constructor: dimensions must be non-zero and every sample finite in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} samples do not form a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::Config(format!("image sample {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Builds an image from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|&v| clamp01(v)));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [T; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Applies `f` to every sample and clamps the result back into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Converts to a single-sample `1×3×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| self.data[(y * w + x) * 3 + c])
    }

    /// Extracts sample `n` of an `N×3×H×W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [batch, c, h, w] = t.shape();
        if c != 3 || n >= batch {
            return Err(Error::Shape(format!("cannot read image {n} from tensor {:?}", t.shape())));
        }
        Ok(Self::from_fn(h, w, |y, x| {
            [t.at([n, 0, y, x]), t.at([n, 1, y, x]), t.at([n, 2, y, x])]
        }))
    }
}

impl<T> std::fmt::Debug for ImageTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor({}x{}x3)", self.height, self.width)
    }
}

/// Stacks same-sized images into an `N×3×H×W` batch.
pub fn images_to_batch<T: Scalar>(images: &[ImageTensor<T>]) -> Result<Tensor<T>> {
    let parts: Vec<_> = images.iter().map(ImageTensor::to_tensor).collect();
    Tensor::stack(&parts)
}

pub fn batch_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<ImageTensor<T>>> {
    (0..t.batch()).map(|n| ImageTensor::from_tensor(t, n)).collect()
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::zero()
    } else {
        v.max(T::zero()).min(T::one())
    }
}

/// Decodes an 8- or 16-bit raster into `[0, 1]`; grayscale is replicated to RGB.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageTensor<T>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::format(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<T> = match decoded {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => decoded
            .to_luma8()
            .into_raw()
            .into_iter()
            .flat_map(|v| [T::lit(v as f64 / 255.0); 3])
            .collect(),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => decoded
            .to_luma16()
            .into_raw()
            .into_iter()
            .flat_map(|v| [T::lit(v as f64 / 65535.0); 3])
            .collect(),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| T::lit(v as f64 / 65535.0))
            .collect(),
        _ => decoded.to_rgb8().into_raw().into_iter().map(|v| T::lit(v as f64 / 255.0)).collect(),
    };
    ImageTensor::new(h, w, data).map_err(|e| Error::format(path, e))
}

/// Writes an 8-bit RGB file; the format follows the extension (PNG when absent).
pub fn save_image<T: Scalar>(img: &ImageTensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize_u8(*v)).collect();
    let buffer = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer sized from image dimensions");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    buffer.write_to(&mut out, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })
}

#[inline]
pub(crate) fn quantize_u8<T: Scalar>(v: T) -> u8 {
    (clamp01(v).as_f64() * 255.0).round() as u8
}

/// Lightness scale of a [`LabTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabScale {
    /// `L ∈ [0, 100]`.
    Unit,
    /// `L ∈ [0, 255]`, i.e. unit lightness × 2.55.
    EightBit,
}

/// Planar CIELAB image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabTensor<T> {
    pub height: usize,
    pub width: usize,
    pub l: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub scale: LabScale,
}

// IEC 61966-2-1 linear sRGB → XYZ matrix.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];
const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;
const EIGHT_BIT_FACTOR: f64 = 2.55;

#[inline]
fn srgb_to_linear<T: Scalar>(v: T) -> T {
    if v <= T::lit(0.04045) {
        v / T::lit(12.92)
    } else {
        ((v + T::lit(0.055)) / T::lit(1.055)).powf(T::lit(2.4))
    }
}

#[inline]
fn lab_f<T: Scalar>(t: T) -> T {
    if t > T::lit(LAB_EPSILON) {
        t.cbrt()
    } else {
        (T::lit(LAB_KAPPA) * t + T::lit(16.0)) / T::lit(116.0)
    }
}

/// Converts one sRGB triple in `[0, 1]` to unit-scale `(L, a, b)`.
///
/// The reference white is the XYZ image of sRGB white under the same matrix,
/// so every neutral gray maps to `a = b = 0`.
pub fn srgb_to_lab_pixel<T: Scalar>(rgb: [T; 3]) -> [T; 3] {
    let lin = rgb.map(srgb_to_linear);
    let m = SRGB_TO_XYZ.map(|row| row.map(T::lit));
    let xyz = m.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let white = m.map(|row| row[0] + row[1] + row[2]);
    let ratio = [xyz[0] / white[0], xyz[1] / white[1], xyz[2] / white[2]];
    let f = ratio.map(lab_f);
    let l = if ratio[1] > T::lit(LAB_EPSILON) {
        T::lit(116.0) * f[1] - T::lit(16.0)
    } else {
        T::lit(LAB_KAPPA) * ratio[1]
    };
    [l, T::lit(500.0) * (f[0] - f[1]), T::lit(200.0) * (f[1] - f[2])]
}

pub fn rgb_to_lab<T: Scalar>(img: &ImageTensor<T>, scale: LabScale) -> LabTensor<T> {
    let n = img.pixel_count();
    let mut lab = LabTensor {
        height: img.height,
        width: img.width,
        l: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        scale,
    };
    let l_factor = match scale {
        LabScale::Unit => None,
        LabScale::EightBit => Some(T::lit(EIGHT_BIT_FACTOR)),
    };
    for px in img.pixels() {
        let [l, a, b] = srgb_to_lab_pixel(px);
        lab.l.push(l_factor.map_or(l, |k| l * k));
        lab.a.push(a);
        lab.b.push(b);
    }
    lab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_are_exact() {
        assert_eq!(srgb_to_lab_pixel([1.0f64; 3]), [100.0, 0.0, 0.0]);
        assert_eq!(srgb_to_lab_pixel([0.0f64; 3]), [0.0, 0.0, 0.0]);
        assert_eq!(srgb_to_lab_pixel([1.0f32; 3]), [100.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_lightness() {
        // Independent evaluation: Y = ((0.5 + 0.055) / 1.055)^2.4 = 0.214041...,
        // L = 116 * Y^(1/3) - 16 = 53.3890...
        let [l, a, b] = srgb_to_lab_pixel([0.5f64; 3]);
        assert!((l - 53.3890).abs() < 1e-3, "L = {l}");
        assert!(a.abs() < 0.01 && b.abs() < 0.01);
    }

    #[test]
    fn eight_bit_scale_multiplies_lightness() {
        let img = ImageTensor::from_fn(3, 4, |y, x| [0.1 * y as f64, 0.2 * x as f64, 0.5]);
        let unit = rgb_to_lab(&img, LabScale::Unit);
        let eight = rgb_to_lab(&img, LabScale::EightBit);
        for (u, e) in unit.l.iter().zip(&eight.l) {
            assert_eq!(*e, *u * 2.55);
        }
        assert_eq!(unit.a, eight.a);
    }

    #[test]
    fn new_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, vec![0.0f32, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0f32, f32::NAN, 0.0]).is_err());
        assert!(ImageTensor::<f32>::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let img = ImageTensor::from_fn(2, 3, |y, x| [y as f32 * 0.5, x as f32 * 0.25, 0.75]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        assert_eq!(t.at([0, 1, 1, 2]), 0.5);
        assert_eq!(ImageTensor::from_tensor(&t, 0).unwrap(), img);
    }
}
