//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use penh_core::{save_image, ImageTensor, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth, bright, colored test pattern; deterministic in `seed`.
pub fn pattern<T: Scalar>(height: usize, width: usize, seed: u64) -> ImageTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [(); 3].map(|_| rng.random_range(0.55..0.8));
    let freq: [f64; 3] = [(); 3].map(|_| rng.random_range(0.1..0.6));
    let phase: [f64; 3] = [(); 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    ImageTensor::from_fn(height, width, |y, x| {
        let mut px = [T::zero(); 3];
        for c in 0..3 {
            let v = base[c] + 0.18 * (freq[c] * x as f64 + phase[c]).sin() * (0.7 * freq[c] * y as f64).cos();
            px[c] = T::lit(v);
        }
        px
    })
}

/// Uniformly random pixels in `[lo, hi)`.
pub fn noise_image<T: Scalar>(height: usize, width: usize, lo: f64, hi: f64, seed: u64) -> ImageTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(height, width, |_, _| [(); 3].map(|_| T::lit(rng.random_range(lo..hi))))
}

/// Writes `per_category` patterns of `side×side` into `<dir>/<category>/img_<i>.png`.
pub fn write_corpus(dir: &Path, categories: &[&str], per_category: usize, side: usize) {
    for (c, cat) in categories.iter().enumerate() {
        std::fs::create_dir_all(dir.join(cat)).unwrap();
        for i in 0..per_category {
            let img = pattern::<f32>(side, side, (c * 1000 + i) as u64);
            save_image(&img, dir.join(cat).join(format!("img_{i:03}.png"))).unwrap();
        }
    }
}

/// Writes images that all fail the luminance gate.
pub fn write_dark_corpus(dir: &Path, n: usize, side: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = noise_image::<f32>(side, side, 0.0, 0.15, i as u64);
        save_image(&img, dir.join(format!("dark_{i:02}.png"))).unwrap();
    }
}

/// Sorted relative paths and bytes of every file under `dir`.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            (rel, std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files.extend(walk(&path));
        } else {
            files.push(path);
        }
    }
    files
}
