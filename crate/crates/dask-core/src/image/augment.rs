//! Color-distribution augmentation, Gaussian blur, and the geometric
//! augmentations used by training batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{channel_stats, DomainStats, Image, CHANNELS, SIGMA_FLOOR};

/// Which arithmetic realizes the channel rewrite.
///
/// `ShiftScale` shifts the mean before rescaling: `((x - mu + mu')/sigma) * sigma'`,
/// landing the channel mean at `mu' * sigma' / sigma`. `Adain` normalizes then
/// re-styles: `((x - mu)/sigma) * sigma' + mu'`, landing the mean at `mu'`.
/// Both leave the channel std at exactly `sigma'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentForm {
    #[default]
    ShiftScale,
    Adain,
}

/// Rewrites each channel with explicitly supplied target statistics. The
/// deterministic core of [`augment_distribution`]; output is not clipped.
pub fn augment_with_samples(
    img: &Image,
    mu_new: [f64; 3],
    sigma_new: [f64; 3],
    form: AugmentForm,
) -> Image {
    let stats = channel_stats(img);
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let mu = stats.mu[c];
        let sigma = stats.sigma[c].max(SIGMA_FLOOR);
        let sn = sigma_new[c];
        let mn = mu_new[c];
        for v in out.channel_mut(c) {
            *v = match form {
                AugmentForm::ShiftScale => ((*v - mu + mn) / sigma) * sn,
                AugmentForm::Adain => ((*v - mu) / sigma) * sn + mn,
            };
        }
    }
    out
}

/// Gaussian-samples per-channel target statistics around the image's own and
/// rewrites the channels. Returns the augmented image together with the
/// sampled means and stds. Sampled stds are clamped to stay positive.
pub fn augment_distribution(
    img: &Image,
    ds: &DomainStats,
    rng: &mut ChaCha8Rng,
    form: AugmentForm,
) -> (Image, [f64; 3], [f64; 3]) {
    let stats = channel_stats(img);
    let mut mu_new = [0.0; 3];
    let mut sigma_new = [0.0; 3];
    for c in 0..CHANNELS {
        mu_new[c] = sample_normal(rng, stats.mu[c], ds.sigma_of_mu[c]);
        sigma_new[c] = sample_normal(rng, stats.sigma[c], ds.sigma_of_sigma[c]).max(SIGMA_FLOOR);
    }
    let out = augment_with_samples(img, mu_new, sigma_new, form);
    (out, mu_new, sigma_new)
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Separable Gaussian filter with replicate-edge padding; radius ceil(3*sigma),
/// taps normalized to sum 1. `sigma = 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as i64)..=(radius as i64) {
        let x = i as f64;
        taps.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= total;
    }

    let (h, w) = (img.height(), img.width());
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.channel(c);
        // Horizontal pass.
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, tap) in taps.iter().enumerate() {
                    let sx = clamp(x as i64 + ti as i64 - radius as i64, w);
                    acc += tap * src[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical pass.
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, tap) in taps.iter().enumerate() {
                    let sy = clamp(y as i64 + ti as i64 - radius as i64, h);
                    acc += tap * tmp[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Shifts the content by (dy, dx), filling exposed cells from the nearest
/// source edge. Used for crop-style jitter without changing the frame size.
pub fn random_translate(img: &Image, rng: &mut ChaCha8Rng, max_shift: i64) -> Image {
    let dy = rng.random_range(-max_shift..=max_shift);
    let dx = rng.random_range(-max_shift..=max_shift);
    translate(img, dy, dx)
}

pub fn translate(img: &Image, dy: i64, dx: i64) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Blanks a random rectangle (up to the given area fraction) with uniform
/// noise, in place.
pub fn random_erase(img: &mut Image, rng: &mut ChaCha8Rng, max_area_fraction: f64) {
    let (h, w) = (img.height(), img.width());
    let area = ((h * w) as f64 * max_area_fraction).max(1.0);
    let eh = rng.random_range(1..=(area.sqrt().ceil() as usize).min(h));
    let ew = rng.random_range(1..=((area / eh as f64).floor().max(1.0) as usize).min(w));
    let y0 = rng.random_range(0..=h - eh);
    let x0 = rng.random_range(0..=w - ew);
    for c in 0..CHANNELS {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let v = rng.random::<f64>();
                img.set(c, y, x, v);
            }
        }
    }
}
