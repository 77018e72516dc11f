//! Luminance-gated synthesis of low-quality images.
//!
//! An image is admitted only when the mean of its positive 8-bit-scale Lab
//! lightness values exceeds the brightness threshold. Admitted images then go
//! through three operators in order, each followed by clamping to `[0, 1]`:
//!
//! 1. additive zero-mean Gaussian noise with std `R_N / 255`,
//! 2. contrast reduction toward the image mean: `v ← (1 − R_C)·v + R_C·μ`,
//! 3. dimming: `v ← (1 − R_B)·v`.
//!
//! `R_N ~ U(0, σ)`, `R_C, R_B ~ U(0, R_max)`, drawn in that order, followed by
//! one standard-normal draw per sample in row-major `y, x, channel` order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorimetry::{clamp01, load_image, rgb_to_lab, save_image, ImageTensor, LabScale};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    /// Noise, contrast and brightness degradation.
    #[default]
    Full,
    /// Noise only, with std drawn from `U(0, noise_only_sigma_max)`.
    NoiseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    /// Lightness threshold on the 8-bit Lab scale.
    pub brightness_threshold: f64,
    pub r_max: f64,
    /// Noise std upper bound in 8-bit pixel units.
    pub sigma_max: f64,
    pub mode: DegradeMode,
    pub noise_only_sigma_max: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            brightness_threshold: 100.0,
            r_max: 0.8,
            sigma_max: 10.0,
            mode: DegradeMode::Full,
            noise_only_sigma_max: 50.0,
            seed: 0,
        }
    }
}

impl DegradeConfig {
    /// The denoising preset: noise std in `[0, 50]`, exposure untouched.
    pub fn noise_only() -> Self {
        Self { mode: DegradeMode::NoiseOnly, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=255.0).contains(&self.brightness_threshold) {
            return Err(Error::Config(format!(
                "brightness threshold {} outside [0, 255]",
                self.brightness_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.r_max) {
            return Err(Error::Config(format!("r_max {} outside [0, 1]", self.r_max)));
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!("sigma_max {} must be >= 0", self.sigma_max)));
        }
        if !(self.noise_only_sigma_max >= 0.0 && self.noise_only_sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "noise_only_sigma_max {} must be >= 0",
                self.noise_only_sigma_max
            )));
        }
        Ok(())
    }
}

/// Sampled degradation strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DegradeParams {
    /// Noise std in 8-bit units.
    pub r_n: f64,
    pub r_c: f64,
    pub r_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeRecord {
    pub accepted: bool,
    /// Mean positive lightness on the 8-bit Lab scale.
    pub mean_luminance: f64,
    /// `None` when the image was skipped.
    pub params: Option<DegradeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DegradeOutcome<T> {
    Degraded(ImageTensor<T>),
    Skipped,
}

impl<T> DegradeOutcome<T> {
    pub fn image(&self) -> Option<&ImageTensor<T>> {
        match self {
            DegradeOutcome::Degraded(img) => Some(img),
            DegradeOutcome::Skipped => None,
        }
    }
}

/// Mean 8-bit-scale lightness over pixels with `L > 0`; `0` when there are none.
pub fn mean_luminance<T: Scalar>(img: &ImageTensor<T>) -> f64 {
    let lab = rgb_to_lab(img, LabScale::EightBit);
    let (sum, count) = lab
        .l
        .iter()
        .map(|l| l.as_f64())
        .filter(|&l| l > 0.0)
        .fold((0.0, 0usize), |(s, c), l| (s + l, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Strict gate: only images brighter than the threshold are admitted.
#[inline]
pub fn passes_luminance_gate(mean_l: f64, config: &DegradeConfig) -> bool {
    mean_l > config.brightness_threshold
}

/// Draws `(R_N, R_C, R_B)` in that order. `U(0, 0)` collapses to exactly 0.
pub fn sample_params<R: Rng + ?Sized>(config: &DegradeConfig, rng: &mut R) -> DegradeParams {
    match config.mode {
        DegradeMode::Full => {
            let r_n = rng.random::<f64>() * config.sigma_max;
            let r_c = rng.random::<f64>() * config.r_max;
            let r_b = rng.random::<f64>() * config.r_max;
            DegradeParams { r_n, r_c, r_b }
        }
        DegradeMode::NoiseOnly => DegradeParams {
            r_n: rng.random::<f64>() * config.noise_only_sigma_max,
            r_c: 0.0,
            r_b: 0.0,
        },
    }
}

/// Applies noise, contrast and brightness with explicit strengths.
///
/// Consumes one standard-normal draw per sample from `rng`.
pub fn apply_degradation<T: Scalar, R: Rng + ?Sized>(
    img: &ImageTensor<T>,
    params: &DegradeParams,
    rng: &mut R,
) -> ImageTensor<T> {
    let noise_std = T::lit(params.r_n / 255.0);
    let noisy = img.map(|v| {
        let z: f64 = rng.sample(StandardNormal);
        v + T::lit(z) * noise_std
    });

    let keep = T::lit(1.0 - params.r_c);
    let r_c = T::lit(params.r_c);
    let mu = noisy.mean();
    let contrasted = noisy.map(|v| v * keep + mu * r_c);

    let dim = T::lit(1.0 - params.r_b);
    contrasted.map(|v| clamp01(v * dim))
}

/// Runs the full gated synthesis on one image.
pub fn degrade<T: Scalar, R: Rng + ?Sized>(
    img: &ImageTensor<T>,
    config: &DegradeConfig,
    rng: &mut R,
) -> (DegradeOutcome<T>, DegradeRecord) {
    let mean_l = mean_luminance(img);
    if !passes_luminance_gate(mean_l, config) {
        let record = DegradeRecord { accepted: false, mean_luminance: mean_l, params: None };
        return (DegradeOutcome::Skipped, record);
    }
    let params = sample_params(config, rng);
    let out = apply_degradation(img, &params, rng);
    let record = DegradeRecord { accepted: true, mean_luminance: mean_l, params: Some(params) };
    (DegradeOutcome::Degraded(out), record)
}

/// Per-image seed: depends only on the corpus seed and the file's relative path.
pub fn image_seed(corpus_seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(corpus_seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub file: String,
    pub accepted: bool,
    #[serde(rename = "mean_L")]
    pub mean_l: f64,
    pub r_n: Option<f64>,
    pub r_c: Option<f64>,
    pub r_b: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub accepted: usize,
    pub skipped: usize,
}

pub const DEGRADED_DIR: &str = "degraded";
pub const REFERENCE_DIR: &str = "reference";
pub const RECORDS_FILE: &str = "records.jsonl";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Relative paths (with `/` separators) of every raster under `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    collect_images(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if is_image_path(&path) {
            let rel = path.strip_prefix(root).expect("walked path lies under root");
            let key: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(key.join("/"));
        }
    }
    Ok(())
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Output key for a source image: same relative path, `.png` extension.
pub fn png_key(key: &str) -> String {
    let path = Path::new(key).with_extension("png");
    path.to_string_lossy().replace('\\', "/")
}

/// Degrades every image under `src_dir`.
///
/// Writes `out_dir/degraded/<key>.png`, the admitted original as
/// `out_dir/reference/<key>.png`, and one sidecar line per source image to
/// `out_dir/records.jsonl` in sorted key order. Images are processed in
/// parallel; each uses its own generator seeded by [`image_seed`].
pub fn degrade_corpus(src_dir: &Path, out_dir: &Path, config: &DegradeConfig) -> Result<CorpusSummary> {
    config.validate()?;
    let keys = list_images(src_dir)?;
    if keys.is_empty() {
        return Err(Error::EmptyCorpus(format!("no images in {}", src_dir.display())));
    }
    for sub in [DEGRADED_DIR, REFERENCE_DIR] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let records: Vec<SidecarRecord> = keys
        .par_iter()
        .map(|key| degrade_one(src_dir, out_dir, key, config))
        .collect::<Result<_>>()?;

    let sidecar = out_dir.join(RECORDS_FILE);
    let mut file = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    for rec in &records {
        let line = serde_json::to_string(rec).expect("sidecar record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(&sidecar, e))?;
    }

    let accepted = records.iter().filter(|r| r.accepted).count();
    Ok(CorpusSummary { total: records.len(), accepted, skipped: records.len() - accepted })
}

fn degrade_one(src_dir: &Path, out_dir: &Path, key: &str, config: &DegradeConfig) -> Result<SidecarRecord> {
    let img = load_image::<f64>(src_dir.join(key))?;
    let seed = image_seed(config.seed, key);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (outcome, record) = degrade(&img, config, &mut rng);
    if let DegradeOutcome::Degraded(out) = &outcome {
        let name = png_key(key);
        let degraded_path = ensure_parent(out_dir.join(DEGRADED_DIR).join(&name))?;
        save_image(out, &degraded_path)?;
        let reference_path = ensure_parent(out_dir.join(REFERENCE_DIR).join(&name))?;
        save_image(&img, &reference_path)?;
    }
    let p = record.params;
    Ok(SidecarRecord {
        file: key.to_string(),
        accepted: record.accepted,
        mean_l: record.mean_luminance,
        r_n: p.map(|p| p.r_n),
        r_c: p.map(|p| p.r_c),
        r_b: p.map(|p| p.r_b),
        seed,
    })
}

fn ensure_parent(path: PathBuf) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn luminance_of_black_white_and_half() {
        let black = ImageTensor::filled(4, 4, [0.0f64; 3]);
        assert_eq!(mean_luminance(&black), 0.0);
        let white = ImageTensor::filled(4, 4, [1.0f64; 3]);
        assert!((mean_luminance(&white) - 255.0).abs() < 1e-9);
        let half = ImageTensor::from_fn(4, 4, |y, _| if y < 2 { [1.0f64; 3] } else { [0.0; 3] });
        assert!((mean_luminance(&half) - 255.0).abs() < 1e-9);
    }

    #[test]
    fn dark_image_is_skipped() {
        // sRGB 0.2 gray: unit L ≈ 21.2, 8-bit L ≈ 54
        let dark = ImageTensor::filled(8, 8, [0.2f64; 3]);
        let (out, rec) = degrade(&dark, &DegradeConfig::default(), &mut rng(1));
        assert_eq!(out, DegradeOutcome::Skipped);
        assert!(!rec.accepted && rec.params.is_none());
        assert!(rec.mean_luminance < 100.0);
    }

    #[test]
    fn gate_is_strict_at_threshold() {
        let cfg = DegradeConfig::default();
        assert!(!passes_luminance_gate(100.0, &cfg));
        assert!(passes_luminance_gate(100.000001, &cfg));
    }

    #[test]
    fn zero_range_gives_zero_factors() {
        let cfg = DegradeConfig { r_max: 0.0, ..Default::default() };
        let mut r = rng(3);
        for _ in 0..100 {
            let p = sample_params(&cfg, &mut r);
            assert_eq!((p.r_c, p.r_b), (0.0, 0.0));
            assert!((0.0..=10.0).contains(&p.r_n));
        }
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = DegradeConfig::default();
        assert_eq!(sample_params(&cfg, &mut rng(9)), sample_params(&cfg, &mut rng(9)));
    }

    #[test]
    fn zero_strengths_are_identity() {
        let img = ImageTensor::from_fn(5, 7, |y, x| [0.1 * y as f64, 0.9 - 0.1 * x as f64, 0.6]);
        let out = apply_degradation(&img, &DegradeParams::default(), &mut rng(4));
        assert_eq!(out, img);
    }

    #[test]
    fn noise_only_with_zero_sigma_is_identity() {
        let cfg = DegradeConfig { noise_only_sigma_max: 0.0, ..DegradeConfig::noise_only() };
        let img = ImageTensor::from_fn(6, 6, |y, x| [0.5 + 0.05 * y as f64, 0.7, 0.4 + 0.05 * x as f64]);
        let (out, rec) = degrade(&img, &cfg, &mut rng(5));
        assert!(rec.accepted);
        assert_eq!(out.image().unwrap(), &img);
    }

    #[test]
    fn image_seed_is_stable_and_key_dependent() {
        assert_eq!(image_seed(7, "a.png"), image_seed(7, "a.png"));
        assert_ne!(image_seed(7, "a.png"), image_seed(7, "b.png"));
        assert_ne!(image_seed(7, "a.png"), image_seed(8, "a.png"));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(DegradeConfig { r_max: 1.5, ..Default::default() }.validate().is_err());
        assert!(DegradeConfig { sigma_max: -1.0, ..Default::default() }.validate().is_err());
        assert!(DegradeConfig { brightness_threshold: 300.0, ..Default::default() }.validate().is_err());
    }
}
