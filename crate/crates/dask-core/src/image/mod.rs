//! RGB image values, per-channel statistics, and style-transfer transforms.
//!
//! Pixels are stored channel-planar (`[c][y][x]`) as f64 in [0,1] for source
//! images; intermediate transformed images may leave the unit interval and are
//! only clipped when persisted or fed to a feature extractor.

mod augment;
mod ppm;
mod transfer;

pub use augment::{
    augment_distribution, augment_with_samples, gaussian_blur, hflip, random_erase,
    random_translate, AugmentForm,
};
pub use ppm::{read_ppm, write_ppm};
pub use transfer::{apply_transfer_kernel, cop_transfer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Divisor floor for per-channel standard deviations; keeps the augmentation
/// formula finite on constant channels.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyInput("zero-size image".into()));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} pixel values for {}x{}x{}",
                pixels.len(),
                height,
                width,
                CHANNELS
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let hw = height * width;
        let mut pixels = Vec::with_capacity(hw * CHANNELS);
        for c in 0..CHANNELS {
            pixels.extend(std::iter::repeat(rgb[c]).take(hw));
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.pixels[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.pixels[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clipped(&self) -> Image {
        let mut out = self.clone();
        for v in out.pixels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// View as a [1,C,H,W] tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, CHANNELS, self.height, self.width],
            self.pixels.clone(),
        )
        .expect("image layout is always consistent")
    }

    pub fn from_tensor_data(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Image::new(height, width, data.to_vec())
    }
}

/// Packs a batch of same-size images into a [B,C,H,W] tensor, clipping each
/// pixel to [0,1] when `clip` is set (extractor inputs are always clipped).
pub fn batch_to_tensor(images: &[&Image], clip: bool) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyInput("empty image batch".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::ShapeMismatch("mixed image sizes in batch".into()));
        }
        if clip {
            data.extend(img.pixels.iter().map(|v| v.clamp(0.0, 1.0)));
        } else {
            data.extend_from_slice(&img.pixels);
        }
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

/// Per-channel mean and population standard deviation of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl ChannelStats {
    /// Euclidean distance over the six statistics.
    pub fn distance(&self, other: &ChannelStats) -> f64 {
        let mut acc = 0.0;
        for c in 0..3 {
            acc += (self.mu[c] - other.mu[c]).powi(2);
            acc += (self.sigma[c] - other.sigma[c]).powi(2);
        }
        acc.sqrt()
    }
}

/// Spread of per-image channel statistics across a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStats {
    pub sigma_of_mu: [f64; 3],
    pub sigma_of_sigma: [f64; 3],
}

pub fn channel_stats(img: &Image) -> ChannelStats {
    let n = (img.height * img.width) as f64;
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    for c in 0..CHANNELS {
        let ch = img.channel(c);
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        mu[c] = mean;
        sigma[c] = var.sqrt();
    }
    ChannelStats { mu, sigma }
}

/// Population standard deviations of per-image means and stds over a dataset.
/// Needs at least two images.
pub fn domain_stats(images: &[Image]) -> Result<DomainStats> {
    if images.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "domain stats need >=2 images, got {}",
            images.len()
        )));
    }
    let stats: Vec<ChannelStats> = images.iter().map(channel_stats).collect();
    let n = stats.len() as f64;
    let mut out = DomainStats {
        sigma_of_mu: [0.0; 3],
        sigma_of_sigma: [0.0; 3],
    };
    for c in 0..CHANNELS {
        let mean_mu = stats.iter().map(|s| s.mu[c]).sum::<f64>() / n;
        let mean_sigma = stats.iter().map(|s| s.sigma[c]).sum::<f64>() / n;
        out.sigma_of_mu[c] = (stats
            .iter()
            .map(|s| (s.mu[c] - mean_mu).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        out.sigma_of_sigma[c] = (stats
            .iter()
            .map(|s| (s.sigma[c] - mean_sigma).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
    }
    Ok(out)
}

/// A per-image distribution transfer kernel: C x C x k x k weights plus a bias
/// per channel, applied as a same-size convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferKernel {
    pub weights: Vec<f64>,
    pub bias: [f64; 3],
    pub k: usize,
}

impl TransferKernel {
    pub fn new(weights: Vec<f64>, bias: [f64; 3], k: usize) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {k} not odd")));
        }
        if weights.len() != CHANNELS * CHANNELS * k * k {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {}x{}x{}x{} kernel",
                weights.len(),
                CHANNELS,
                CHANNELS,
                k,
                k
            )));
        }
        Ok(TransferKernel { weights, bias, k })
    }

    pub fn identity(k: usize) -> Self {
        let mut weights = vec![0.0; CHANNELS * CHANNELS * k * k];
        let center = (k / 2) * k + k / 2;
        for c in 0..CHANNELS {
            weights[(c * CHANNELS + c) * k * k + center] = 1.0;
        }
        TransferKernel {
            weights,
            bias: [0.0; 3],
            k,
        }
    }

    /// Diagonal center-tap kernel realizing the per-channel affine transform
    /// `scale_c * x + shift_c`.
    pub fn from_affine(scale: [f64; 3], shift: [f64; 3], k: usize) -> Self {
        let mut weights = vec![0.0; CHANNELS * CHANNELS * k * k];
        let center = (k / 2) * k + k / 2;
        for c in 0..CHANNELS {
            weights[(c * CHANNELS + c) * k * k + center] = scale[c];
        }
        TransferKernel {
            weights,
            bias: shift,
            k,
        }
    }

    pub fn param_count(k: usize) -> usize {
        CHANNELS * CHANNELS * k * k + CHANNELS
    }

    /// Largest absolute difference from another kernel of the same size.
    pub fn max_abs_diff(&self, other: &TransferKernel) -> f64 {
        let w = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let b = self
            .bias
            .iter()
            .zip(&other.bias)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        w.max(b)
    }
}
