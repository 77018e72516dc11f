//! Paired degraded/reference manifests, splits and training batches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorimetry::{images_to_batch, load_image, ImageTensor};
use crate::degrade::{image_seed, list_images};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Radiology,
    Dermatology,
    Microscopy,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Radiology, Category::Dermatology, Category::Microscopy, Category::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Radiology => "radiology",
            Category::Dermatology => "dermatology",
            Category::Microscopy => "microscopy",
            Category::Other => "other",
        }
    }

    /// Directory-name convention: the first path component of the key.
    pub fn from_key(key: &str) -> Category {
        key.split('/')
            .next()
            .filter(|_| key.contains('/'))
            .and_then(|dir| dir.parse().ok())
            .unwrap_or(Category::Other)
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radiology" => Ok(Category::Radiology),
            "dermatology" => Ok(Category::Dermatology),
            "microscopy" => Ok(Category::Microscopy),
            "other" => Ok(Category::Other),
            _ => Err(Error::Config(format!("unknown category `{s}`"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    /// Relative image path shared by the degraded and reference trees.
    pub key: String,
    pub degraded_path: PathBuf,
    pub reference_path: PathBuf,
    pub category: Category,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    pub entries: Vec<PairEntry>,
    pub seed: u64,
}

/// How [`split_manifest`] assigns entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Rank entries by a keyed hash and cut at the rounded fractions: exact counts.
    #[default]
    Ranked,
    /// Threshold each entry's keyed hash independently: existing assignments never
    /// change when files are added, but counts are only approximate.
    Hashed,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Pairs files with identical relative paths under the two directories.
///
/// Categories come from `mapping` (a JSON object `{key: category}`) when it
/// names the key, otherwise from the first directory component.
pub fn build_manifest(
    degraded_dir: &Path,
    reference_dir: &Path,
    mapping: Option<&Path>,
) -> Result<PairManifest> {
    let degraded: BTreeSet<String> = list_images(degraded_dir)?.into_iter().collect();
    let reference: BTreeSet<String> = list_images(reference_dir)?.into_iter().collect();
    if degraded.is_empty() && reference.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no images in {} or {}",
            degraded_dir.display(),
            reference_dir.display()
        )));
    }
    if let Some(orphan) = degraded.difference(&reference).next() {
        return Err(Error::Pairing(format!(
            "{} has no reference in {}",
            degraded_dir.join(orphan).display(),
            reference_dir.display()
        )));
    }
    if let Some(orphan) = reference.difference(&degraded).next() {
        return Err(Error::Pairing(format!(
            "{} has no degraded counterpart in {}",
            reference_dir.join(orphan).display(),
            degraded_dir.display()
        )));
    }
    let overrides = match mapping {
        Some(path) => read_category_mapping(path)?,
        None => BTreeMap::new(),
    };
    let entries = degraded
        .into_iter()
        .map(|key| PairEntry {
            degraded_path: degraded_dir.join(&key),
            reference_path: reference_dir.join(&key),
            category: overrides.get(&key).copied().unwrap_or_else(|| Category::from_key(&key)),
            split: Split::Train,
            key,
        })
        .collect();
    Ok(PairManifest { entries, seed: 0 })
}

fn read_category_mapping(path: &Path) -> Result<BTreeMap<String, Category>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn unit_hash(key: &str, seed: u64) -> f64 {
    (image_seed(seed, key) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministically assigns train/val/test; whatever is not train or val is test.
pub fn split_manifest(
    manifest: &PairManifest,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
    strategy: SplitStrategy,
) -> Result<PairManifest> {
    if !(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "split fractions train={train_frac} val={val_frac} must be >= 0 and sum to <= 1"
        )));
    }
    let mut out = manifest.clone();
    out.seed = seed;
    match strategy {
        SplitStrategy::Ranked => {
            let n = out.entries.len();
            let n_train = ((n as f64 * train_frac).round() as usize).min(n);
            let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (image_seed(seed, &out.entries[i].key), i));
            for (rank, &i) in order.iter().enumerate() {
                out.entries[i].split = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        SplitStrategy::Hashed => {
            for e in &mut out.entries {
                let u = unit_hash(&e.key, seed);
                e.split = if u < train_frac {
                    Split::Train
                } else if u < train_frac + val_frac {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    key: String,
    degraded: PathBuf,
    reference: PathBuf,
    category: Category,
    split: Split,
    seed: u64,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of the entries assigned to `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Writes one JSON object per entry. Paths under the manifest's directory
    /// are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = ManifestLine {
                key: e.key.clone(),
                degraded: relative_to(&e.degraded_path, &base),
                reference: relative_to(&e.reference_path, &base),
                category: e.category,
                split: e.split,
                seed: self.seed,
            };
            let text = serde_json::to_string(&line).expect("manifest line serializes");
            writeln!(file, "{text}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Reads a manifest, resolving relative paths against its directory and
    /// checking that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut manifest = PairManifest::default();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            let degraded_path = base.join(parsed.degraded);
            let reference_path = base.join(parsed.reference);
            for p in [&degraded_path, &reference_path] {
                if !p.exists() {
                    return Err(Error::NotFound(p.clone()));
                }
            }
            manifest.seed = parsed.seed;
            manifest.entries.push(PairEntry {
                key: parsed.key,
                degraded_path,
                reference_path,
                category: parsed.category,
                split: parsed.split,
            });
        }
        Ok(manifest)
    }
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    if base.as_os_str().is_empty() {
        return path.to_path_buf();
    }
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Bilinear resize with half-pixel centres; an equal-size resize is the identity.
pub fn resize_bilinear<T: Scalar>(img: &ImageTensor<T>, height: usize, width: usize) -> ImageTensor<T> {
    let (src_h, src_w) = (img.height(), img.width());
    if (src_h, src_w) == (height, width) {
        return img.clone();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, T)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, T::lit(pos - lo as f64))
            })
            .collect()
    };
    let ys = axis(height, src_h);
    let xs = axis(width, src_w);
    ImageTensor::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let (p00, p01, p10, p11) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
        let one = T::one();
        std::array::from_fn(|c| {
            let top = p00[c] * (one - fx) + p01[c] * fx;
            let bottom = p10[c] * (one - fx) + p11[c] * fx;
            top * (one - fy) + bottom * fy
        })
    })
}

/// A degraded/reference batch, both `N×3×side×side`.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub degraded: Tensor<T>,
    pub reference: Tensor<T>,
}

fn load_pair<T: Scalar>(entry: &PairEntry, side: Option<usize>) -> Result<(ImageTensor<T>, ImageTensor<T>)> {
    let degraded = load_image::<T>(&entry.degraded_path)?;
    let reference = load_image::<T>(&entry.reference_path)?;
    Ok(match side {
        Some(s) => (resize_bilinear(&degraded, s, s), resize_bilinear(&reference, s, s)),
        None => (degraded, reference),
    })
}

/// Loads the pairs at `indices` (in that order), resized to `side × side`.
pub fn load_training_batch<T: Scalar>(
    manifest: &PairManifest,
    indices: &[usize],
    side: usize,
) -> Result<PairBatch<T>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= manifest.len()) {
        return Err(Error::Config(format!("index {bad} out of range for {} entries", manifest.len())));
    }
    if indices.is_empty() || side == 0 {
        return Err(Error::Config("batch needs at least one index and a positive side".into()));
    }
    let pairs: Vec<(ImageTensor<T>, ImageTensor<T>)> = indices
        .par_iter()
        .map(|&i| load_pair(&manifest.entries[i], Some(side)))
        .collect::<Result<_>>()?;
    let (degraded, reference): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(PairBatch { degraded: images_to_batch(&degraded)?, reference: images_to_batch(&reference)? })
}

/// Loads one pair at native resolution.
pub fn load_full_pair<T: Scalar>(entry: &PairEntry) -> Result<(ImageTensor<T>, ImageTensor<T>)> {
    load_pair(entry, None)
}
