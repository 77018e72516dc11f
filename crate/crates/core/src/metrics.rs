//! PSNR and color-difference evaluation, per-category reports and inference timing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorimetry::{rgb_to_lab, ImageTensor, LabScale};
use crate::dataset::{load_full_pair, Category, PairEntry, PairManifest, Split};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` with peak 1.0; `+∞` for identical images.
pub fn psnr<T: Scalar>(reference: &ImageTensor<T>, candidate: &ImageTensor<T>) -> Result<f64> {
    same_shape(reference, candidate)?;
    let n = reference.data().len().max(1) as f64;
    let mse = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(&r, &c)| {
            let d = r.as_f64() - c.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaEFormula {
    #[default]
    Ciede2000,
    /// Euclidean distance in Lab.
    Cie76,
}

impl FromStr for DeltaEFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ciede2000" | "de2000" | "2000" => Ok(Self::Ciede2000),
            "cie76" | "de76" | "76" => Ok(Self::Cie76),
            _ => Err(Error::Config(format!("unknown color-difference formula `{s}`"))),
        }
    }
}

pub fn cie76(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let d = [lab1[0] - lab2[0], lab1[1] - lab2[1], lab1[2] - lab2[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn hue_degrees(b: f64, a: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let h = b.atan2(a).to_degrees();
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

/// CIEDE2000 difference between two unit-scale Lab colors (`kL = kC = kH = 1`).
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    const POW25_7: f64 = 6_103_515_625.0;
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;

    let c_bar = ((a1 * a1 + b1 * b1).sqrt() + (a2 * a2 + b2 * b2).sqrt()) / 2.0;
    let c_bar7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + POW25_7)).sqrt());
    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = (a1p * a1p + b1 * b1).sqrt();
    let c2p = (a2p * a2p + b2 * b2).sqrt();
    let h1p = hue_degrees(b1, a1p);
    let h2p = hue_degrees(b2, a2p);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let chroma_product = c1p * c2p;
    let dh = if chroma_product == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh_big = 2.0 * chroma_product.sqrt() * (dh.to_radians() / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let cp_bar = (c1p + c2p) / 2.0;
    let hp_sum = h1p + h2p;
    let hp_bar = if chroma_product == 0.0 {
        hp_sum
    } else if (h1p - h2p).abs() <= 180.0 {
        hp_sum / 2.0
    } else if hp_sum < 360.0 {
        (hp_sum + 360.0) / 2.0
    } else {
        (hp_sum - 360.0) / 2.0
    };

    let cos_deg = |d: f64| d.to_radians().cos();
    let t = 1.0 - 0.17 * cos_deg(hp_bar - 30.0) + 0.24 * cos_deg(2.0 * hp_bar) + 0.32 * cos_deg(3.0 * hp_bar + 6.0)
        - 0.20 * cos_deg(4.0 * hp_bar - 63.0);
    let d_theta = 30.0 * (-((hp_bar - 275.0) / 25.0).powi(2)).exp();
    let cp_bar7 = cp_bar.powi(7);
    let r_c = 2.0 * (cp_bar7 / (cp_bar7 + POW25_7)).sqrt();
    let l_off = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l_off / (20.0 + l_off).sqrt();
    let s_c = 1.0 + 0.045 * cp_bar;
    let s_h = 1.0 + 0.015 * cp_bar * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;

    let (tl, tc, th) = (dl / s_l, dc / s_c, dh_big / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// Mean per-pixel color difference in unit-scale Lab.
pub fn delta_e<T: Scalar>(reference: &ImageTensor<T>, candidate: &ImageTensor<T>, formula: DeltaEFormula) -> Result<f64> {
    same_shape(reference, candidate)?;
    let to_f64 = |img: &ImageTensor<T>| rgb_to_lab(&img.cast::<f64>(), LabScale::Unit);
    let (r, c) = (to_f64(reference), to_f64(candidate));
    let diff = match formula {
        DeltaEFormula::Ciede2000 => ciede2000,
        DeltaEFormula::Cie76 => cie76,
    };
    let n = r.l.len();
    let total: f64 = (0..n).map(|i| diff([r.l[i], r.a[i], r.b[i]], [c.l[i], c.a[i], c.b[i]])).sum();
    Ok(total / n.max(1) as f64)
}

/// Anything that maps a degraded image to an enhanced one.
pub trait Enhancer<T>: Sync {
    fn enhance_pair(&self, entry: &PairEntry, degraded: &ImageTensor<T>) -> Result<ImageTensor<T>>;
}

impl<T: Scalar> Enhancer<T> for Generator<T> {
    fn enhance_pair(&self, _: &PairEntry, degraded: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.enhance(degraded)
    }
}

impl<T, F> Enhancer<T> for F
where
    F: Fn(&PairEntry, &ImageTensor<T>) -> Result<ImageTensor<T>> + Sync,
{
    fn enhance_pair(&self, entry: &PairEntry, degraded: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self(entry, degraded)
    }
}

/// Pass-through baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl<T: Scalar> Enhancer<T> for Identity {
    fn enhance_pair(&self, _: &PairEntry, degraded: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        Ok(degraded.clone())
    }
}

/// JSON cannot hold infinities; they travel as the string `"inf"`.
mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub key: String,
    pub category: Category,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub delta_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    /// Mean over images with finite PSNR; `inf` when every image was identical.
    #[serde(with = "inf_as_string")]
    pub psnr_mean: f64,
    pub delta_e_mean: f64,
    pub count: usize,
    /// Images whose PSNR was infinite and so left out of `psnr_mean`.
    pub psnr_infinite: usize,
}

impl CategoryStats {
    fn from_images<'a>(images: impl Iterator<Item = &'a ImageMetrics>) -> Self {
        let (mut finite_sum, mut finite_n, mut infinite, mut de_sum, mut count) = (0.0, 0usize, 0usize, 0.0, 0usize);
        for m in images {
            count += 1;
            de_sum += m.delta_e;
            if m.psnr.is_finite() {
                finite_sum += m.psnr;
                finite_n += 1;
            } else {
                infinite += 1;
            }
        }
        let psnr_mean = if finite_n > 0 { finite_sum / finite_n as f64 } else { f64::INFINITY };
        Self { psnr_mean, delta_e_mean: de_sum / count.max(1) as f64, count, psnr_infinite: infinite }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub delta_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub formula: DeltaEFormula,
    pub per_category: BTreeMap<Category, CategoryStats>,
    /// Unweighted mean of the category means.
    pub average: Average,
    pub images: Vec<ImageMetrics>,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const BENCH_CSV: &str = "bench.csv";

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>, formula: DeltaEFormula) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyCorpus("no images to aggregate".into()));
        }
        let mut per_category = BTreeMap::new();
        for cat in Category::ALL {
            if images.iter().any(|m| m.category == cat) {
                per_category.insert(cat, CategoryStats::from_images(images.iter().filter(|m| m.category == cat)));
            }
        }
        let k = per_category.len() as f64;
        let finite: Vec<f64> = per_category.values().map(|s| s.psnr_mean).filter(|v| v.is_finite()).collect();
        let psnr = if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let delta_e = per_category.values().map(|s| s.delta_e_mean).sum::<f64>() / k;
        Ok(Self { formula, per_category, average: Average { psnr, delta_e }, images })
    }

    /// Aligned text table, one row per category plus the average.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>10} {:>10}\n", "category", "count", "PSNR (dB)", "DeltaE");
        for (cat, s) in &self.per_category {
            let _ = writeln!(out, "{:<12} {:>6} {:>10} {:>10.2}", cat.as_str(), s.count, fmt_db(s.psnr_mean), s.delta_e_mean);
        }
        let total: usize = self.per_category.values().map(|s| s.count).sum();
        let _ = writeln!(out, "{:<12} {:>6} {:>10} {:>10.2}", "average", total, fmt_db(self.average.psnr), self.average.delta_e);
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        let json_path = dir.join(REPORT_JSON);
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

        let csv_path = dir.join(REPORT_CSV);
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e))?;
        let rows = self
            .per_category
            .iter()
            .map(|(c, s)| (c.as_str(), s.count, s.psnr_mean, s.delta_e_mean, s.psnr_infinite))
            .chain(std::iter::once((
                "average",
                self.per_category.values().map(|s| s.count).sum(),
                self.average.psnr,
                self.average.delta_e,
                self.per_category.values().map(|s| s.psnr_infinite).sum(),
            )));
        w.write_record(["category", "count", "psnr_mean", "delta_e_mean", "psnr_infinite"])
            .map_err(|e| Error::format(&csv_path, e))?;
        for (cat, count, psnr, de, inf) in rows {
            w.write_record([cat.to_string(), count.to_string(), fmt_full(psnr), fmt_full(de), inf.to_string()])
                .map_err(|e| Error::format(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

fn fmt_full(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// Enhances every pair of `split` at native resolution and scores it against its reference.
pub fn evaluate<T: Scalar, E: Enhancer<T> + ?Sized>(
    manifest: &PairManifest,
    split: Split,
    enhancer: &E,
    formula: DeltaEFormula,
) -> Result<MetricReport> {
    let indices = manifest.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyCorpus(format!("manifest has no {split:?} pairs").to_lowercase()));
    }
    let images = indices
        .par_iter()
        .map(|&i| {
            let entry = &manifest.entries[i];
            let (degraded, reference) = load_full_pair::<T>(entry)?;
            let enhanced = enhancer.enhance_pair(entry, &degraded)?;
            Ok(ImageMetrics {
                key: entry.key.clone(),
                category: entry.category,
                psnr: psnr(&reference, &enhanced)?,
                delta_e: delta_e(&reference, &enhanced, formula)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(images, formula)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub resolution: usize,
    pub device_label: String,
    pub seconds_mean: f64,
    pub seconds_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Resolutions timed by default.
pub const BENCH_RESOLUTIONS: [usize; 3] = [256, 512, 1024];
pub const MIN_BENCH_RUNS: usize = 3;

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:<10} {:>12} {:>12} {:>5}\n", "resolution", "device", "mean (s)", "std (s)", "runs");
        for r in &self.rows {
            let res = format!("{0}x{0}x3", r.resolution);
            let _ = writeln!(
                out,
                "{:<14} {:<10} {:>12.4} {:>12.4} {:>5}",
                res, r.device_label, r.seconds_mean, r.seconds_std, r.runs
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Times full-image inference at square resolutions; one untimed warm-up pass each.
pub fn bench_inference<T: Scalar>(
    generator: &Generator<T>,
    resolutions: &[usize],
    runs: usize,
    device_label: &str,
) -> Result<BenchReport> {
    if runs < MIN_BENCH_RUNS {
        return Err(Error::Config(format!("bench needs at least {MIN_BENCH_RUNS} runs, got {runs}")));
    }
    let multiple = generator.config().size_multiple().max(16);
    if let Some(&bad) = resolutions.iter().find(|&&r| r == 0 || r % multiple != 0) {
        return Err(Error::Shape(format!("resolution {bad} is not a positive multiple of {multiple}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(resolutions.len());
    for &side in resolutions {
        let img = ImageTensor::<T>::from_fn(side, side, |_, _| [(); 3].map(|_| T::lit(rng.random::<f64>())));
        generator.enhance(&img)?;
        let times: Vec<f64> = (0..runs)
            .map(|_| {
                let start = Instant::now();
                generator.enhance(&img).map(|_| start.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        let mean = times.iter().sum::<f64>() / runs as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        rows.push(BenchRow {
            resolution: side,
            device_label: device_label.to_string(),
            seconds_mean: mean,
            seconds_std: var.sqrt(),
            runs,
        });
    }
    Ok(BenchReport { rows })
}
