//! Class-conditional Gaussian-blob images.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    /// Square image side.
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Std of the pixel noise added to every image.
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

/// Class `k` is a bump centred on a circle at angle `2πk/M`, brightest in
/// channel `k mod C`. The seed only drives the noise, so train and test sets
/// drawn with different seeds share their class templates.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let &SyntheticSpec {
        num_classes: m,
        per_class,
        size,
        channels,
        noise,
        seed,
    } = spec;
    if m < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {m}")));
    }
    if size == 0 || channels == 0 {
        return Err(Error::Config("synthetic image size and channels must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("synthetic noise must be nonnegative, got {noise}")));
    }
    let templates: Vec<Vec<f32>> = (0..m).map(|k| template(k, m, size, channels)).collect();
    let normal = Normal::new(0.0f32, noise).expect("noise is finite and nonnegative");
    let mut rng = rng_from_seed(seed);
    let mut images = Vec::with_capacity(m * per_class * templates[0].len());
    let mut labels = Vec::with_capacity(m * per_class);
    for i in 0..m * per_class {
        let k = i % m;
        if noise > 0.0 {
            images.extend(templates[k].iter().map(|&v| v + normal.sample(&mut rng)));
        } else {
            images.extend_from_slice(&templates[k]);
        }
        labels.push(k);
    }
    Dataset::new([channels, size, size], m, images, labels)
}

fn template(k: usize, m: usize, size: usize, channels: usize) -> Vec<f32> {
    let mid = (size as f32 - 1.0) / 2.0;
    let radius = size as f32 / 4.0;
    let sigma = (size as f32 / 8.0).max(0.5);
    let angle = std::f32::consts::TAU * k as f32 / m as f32;
    let (cy, cx) = (mid + radius * angle.sin(), mid + radius * angle.cos());
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        let gain = if c == k % channels { 1.0 } else { 0.5 };
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                out.push(gain * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}
