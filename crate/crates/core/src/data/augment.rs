use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, Sample, Supervision};
use crate::error::{Error, Result};

/// Brightness/contrast jitter magnitudes (fractions of the unit intensity range).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// Mirrors image and box horizontally.
pub fn flip_sample(sample: &Sample, image: &GrayImage) -> (Sample, GrayImage) {
    let mut s = sample.clone();
    s.bbox = sample
        .bbox
        .map(|b| b.flip_horizontal(image.width() as f64));
    (s, image.flip_horizontal())
}

/// Random brightness offset and contrast scale about the image mean. Pixels only.
pub fn jitter<R: Rng + ?Sized>(image: &mut GrayImage, cfg: JitterConfig, rng: &mut R) {
    if cfg.brightness <= 0.0 && cfg.contrast <= 0.0 {
        return;
    }
    let offset = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let scale = if cfg.contrast > 0.0 {
        rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
    } else {
        1.0
    };
    let mean = image.mean();
    for p in image.pixels_mut() {
        *p = ((*p - mean) * scale + mean + offset).clamp(0.0, 1.0);
    }
}

/// Flip (when `flipped`) then jitter a strong sample. The box follows the flip only.
pub fn augment_strong<R: Rng + ?Sized>(
    sample: &Sample,
    image: &GrayImage,
    flipped: bool,
    cfg: JitterConfig,
    rng: &mut R,
) -> Result<(Sample, GrayImage)> {
    if sample.supervision != Supervision::Strong {
        return Err(Error::invalid(format!(
            "augment_strong called on weak sample {}",
            sample.image_id
        )));
    }
    let (s, mut img) = if flipped {
        flip_sample(sample, image)
    } else {
        (sample.clone(), image.clone())
    };
    jitter(&mut img, cfg, rng);
    Ok((s, img))
}
