//! Dataset storage, channel statistics, and the preprocessing pipeline.

mod codec;
mod partition;
mod synthetic;

pub use codec::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use partition::{
    partition_dirichlet, partition_iid, partition_shards, PartitionPlan, PartitionScheme,
};
pub use synthetic::gen_synthetic;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardization floor. Constant channels standardize against
/// this instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-3;

/// Post-standardization values are clipped to this band.
pub const STANDARDIZED_BOUND: f64 = 10.0;

/// Labeled u8 images with uniform `C x H x W` extents, plus the per-channel
/// statistics computed from the stored images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<u8>,
    labels: Vec<u16>,
    class_names: Vec<String>,
    stats: ChannelStats,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Dataset> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        let example_size = channels * height * width;
        if images.len() != labels.len() * example_size {
            return Err(Error::Config(format!(
                "{} labels with {example_size}-byte examples need {} pixel bytes, got {}",
                labels.len(),
                labels.len() * example_size,
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let stats = ChannelStats::compute(channels, height, width, &images);
        Ok(Dataset {
            channels,
            height,
            width,
            images,
            labels,
            class_names,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.images
    }

    /// Statistics of the stored images. For the training split these are the
    /// standardization statistics; evaluation reuses the training split's.
    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn example_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> ImageRef<'_> {
        let size = self.example_size();
        ImageRef {
            pixels: &self.images[i * size..(i + 1) * size],
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Borrowed view of one `C x H x W` image.
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub pixels: &'a [u8],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-channel mean and standard deviation of pixel values scaled to
/// `[0,1]`, with the std floored at [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(channels: usize, height: usize, width: usize, images: &[u8]) -> ChannelStats {
        let plane = height * width;
        let example = channels * plane;
        let n_examples = if example == 0 { 0 } else { images.len() / example };
        let count = (n_examples * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for e in 0..n_examples {
            for c in 0..channels {
                let base = e * example + c * plane;
                for &px in &images[base..base + plane] {
                    let v = px as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let mut std = vec![STD_FLOOR; channels];
        if count > 0.0 {
            for c in 0..channels {
                mean[c] /= count;
                let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
                std[c] = var.sqrt().max(STD_FLOOR);
            }
        }
        ChannelStats { mean, std }
    }

    pub fn of(dataset: &Dataset) -> ChannelStats {
        ChannelStats::compute(
            dataset.channels,
            dataset.height,
            dataset.width,
            &dataset.images,
        )
    }
}

/// Augmentation and normalization options for the training path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOpts {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_prob: f64,
    pub standardize: bool,
}

impl PreprocessOpts {
    /// Full-size crop, no flipping, standardization on.
    pub fn identity(height: usize, width: usize) -> PreprocessOpts {
        PreprocessOpts {
            crop_height: height,
            crop_width: width,
            flip_prob: 0.0,
            standardize: true,
        }
    }

    pub fn validate(&self, image_height: usize, image_width: usize) -> Result<()> {
        if self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::Config("crop extents must be positive".into()));
        }
        if self.crop_height > image_height || self.crop_width > image_width {
            return Err(Error::Config(format!(
                "crop {}x{} larger than image {image_height}x{image_width}",
                self.crop_height, self.crop_width
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Deterministic preprocessing core: crop at `(top, left)`, optionally
/// mirror horizontally, scale to `[0,1]`, then standardize per channel.
pub fn preprocess_at(
    img: ImageRef<'_>,
    opts: &PreprocessOpts,
    stats: &ChannelStats,
    top: usize,
    left: usize,
    flip: bool,
) -> Result<Tensor> {
    opts.validate(img.height, img.width)?;
    if top + opts.crop_height > img.height || left + opts.crop_width > img.width {
        return Err(Error::Config(format!(
            "crop origin ({top}, {left}) overruns image {}x{}",
            img.height, img.width
        )));
    }
    if opts.standardize && stats.mean.len() != img.channels {
        return Err(Error::Shape(format!(
            "statistics cover {} channels, image has {}",
            stats.mean.len(),
            img.channels
        )));
    }
    let (hc, wc) = (opts.crop_height, opts.crop_width);
    let mut data = vec![0.0; img.channels * hc * wc];
    for c in 0..img.channels {
        for y in 0..hc {
            for x in 0..wc {
                let src_x = if flip { wc - 1 - x } else { x };
                let px = img.pixels
                    [(c * img.height + top + y) * img.width + left + src_x];
                let mut v = px as f64 / 255.0;
                if opts.standardize {
                    v = ((v - stats.mean[c]) / stats.std[c])
                        .clamp(-STANDARDIZED_BOUND, STANDARDIZED_BOUND);
                }
                data[(c * hc + y) * wc + x] = v;
            }
        }
    }
    Tensor::new(vec![img.channels, hc, wc], data)
}

/// Training-path preprocessing: uniform-random crop, horizontal flip with
/// probability `flip_prob`, scale, standardize.
pub fn preprocess<R: Rng>(
    img: ImageRef<'_>,
    opts: &PreprocessOpts,
    stats: &ChannelStats,
    rng: &mut R,
) -> Result<Tensor> {
    opts.validate(img.height, img.width)?;
    let top = rng.random_range(0..=img.height - opts.crop_height);
    let left = rng.random_range(0..=img.width - opts.crop_width);
    let flip = opts.flip_prob > 0.0 && rng.random::<f64>() < opts.flip_prob;
    preprocess_at(img, opts, stats, top, left, flip)
}

/// Evaluation-path preprocessing: center crop, never flips.
pub fn preprocess_center(
    img: ImageRef<'_>,
    opts: &PreprocessOpts,
    stats: &ChannelStats,
) -> Result<Tensor> {
    opts.validate(img.height, img.width)?;
    let top = (img.height - opts.crop_height) / 2;
    let left = (img.width - opts.crop_width) / 2;
    preprocess_at(img, opts, stats, top, left, false)
}
