//! Synthetic image classes for desk-scale runs: each class is a fixed
//! Gaussian-blob template, so geometry depends only on the class index and
//! the image extents. The seed drives per-example noise alone, which keeps
//! two differently seeded splits identically distributed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

use super::Dataset;

const NOISE_AMPLITUDE: f64 = 25.0;

/// Template intensity at `(x, y)` for class `k`: a background level plus a
/// Gaussian blob whose center walks a circle with the class index and whose
/// scale cycles through three sizes. The blob amplitude is deliberately
/// small against the per-pixel noise so the classes are statistically
/// separable without being trivial.
fn template_value(k: usize, classes: usize, height: usize, width: usize, y: usize, x: usize) -> f64 {
    let side = height.min(width) as f64;
    let angle = std::f64::consts::TAU * k as f64 / classes as f64;
    let cx = width as f64 / 2.0 + 0.24 * side * angle.cos();
    let cy = height as f64 / 2.0 + 0.24 * side * angle.sin();
    let sigma = (0.13 + 0.025 * (k % 3) as f64) * side;
    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
    40.0 + 16.0 * (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Generates `classes * per_class` examples, grouped by class, each a class
/// template plus uniform per-pixel noise in `[-25, +25]` clamped to
/// `[0, 255]`.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    for (what, v) in [
        ("classes", classes),
        ("per_class", per_class),
        ("channels", channels),
        ("height", height),
        ("width", width),
    ] {
        if v == 0 {
            return Err(Error::Config(format!("{what} must be positive")));
        }
    }
    if classes > u16::MAX as usize {
        return Err(Error::Config(format!("{classes} classes exceed the label range")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut images = Vec::with_capacity(classes * per_class * channels * plane);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let mut template = vec![0.0f64; plane];
        for y in 0..height {
            for x in 0..width {
                template[y * width + x] = template_value(k, classes, height, width, y, x);
            }
        }
        for _ in 0..per_class {
            labels.push(k as u16);
            for _c in 0..channels {
                for &t in &template {
                    let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                    images.push((t + noise).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let class_names = (0..classes).map(|k| format!("class_{k}")).collect();
    Dataset::new(channels, height, width, images, labels, class_names)
}
