//! Deterministic synthetic stand-in for a small ultrasound-like mass dataset.
//!
//! Every image holds exactly one lesion on a speckled, low-frequency textured
//! background. `class_1` lesions are smooth ellipses, `class_2` lesions are
//! spiculated star polygons. Size and intensity ranges of the two classes
//! overlap, so only the boundary shape separates them reliably.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, GrayImage, Origin, Sample, Split, Supervision};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ClassLabel};
use crate::rng::rng_for_str;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class_1: usize,
    pub class_2: usize,
}

impl ClassCounts {
    pub fn get(&self, label: ClassLabel) -> usize {
        match label {
            ClassLabel::Class1 => self.class_1,
            ClassLabel::Class2 => self.class_2,
            ClassLabel::Background => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.class_1 + self.class_2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub train_strong: ClassCounts,
    pub test: ClassCounts,
    pub weak_total: usize,
    /// `class_1 : class_2` ratio of the weak split.
    pub weak_ratio: f64,
    /// Standard deviation of the unit-mean multiplicative speckle.
    pub speckle: f64,
    /// Lesion diameter range as a fraction of the image side.
    pub lesion_size: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 128,
            train_strong: ClassCounts {
                class_1: 40,
                class_2: 40,
            },
            test: ClassCounts {
                class_1: 50,
                class_2: 50,
            },
            weak_total: 300,
            weak_ratio: 3.5,
            speckle: 0.3,
            lesion_size: (0.2, 0.45),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_size;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("lesion_size {:?} must lie inside (0, 1)", self.lesion_size)));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(self.weak_ratio.is_finite() && self.weak_ratio > 0.0) {
            return Err(Error::Config("weak_ratio must be positive".into()));
        }
        if !(self.speckle.is_finite() && self.speckle >= 0.0) {
            return Err(Error::Config("speckle must be non-negative".into()));
        }
        Ok(())
    }

    /// Weak-split counts; the minority class gets `floor(total / (ratio + 1))`.
    pub fn weak_counts(&self) -> ClassCounts {
        let class_2 = (self.weak_total as f64 / (self.weak_ratio + 1.0)).floor() as usize;
        ClassCounts {
            class_1: self.weak_total - class_2,
            class_2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: GrayImage,
    /// Row-major lesion mask.
    pub mask: Vec<bool>,
    pub bbox: BoundingBox,
}

/// Tight box around mask pixels, each pixel covering `[x, x+1) x [y, y+1)`.
pub fn lesion_box_from_mask(mask: &[bool], width: usize) -> Option<BoundingBox> {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
        any = true;
    }
    any.then(|| {
        BoundingBox::new(lo.0 as f64, lo.1 as f64, hi.0 as f64 + 1.0, hi.1 as f64 + 1.0)
            .expect("non-empty mask has positive extent")
    })
}

enum Shape {
    Ellipse {
        a: f64,
        b: f64,
        cos_t: f64,
        sin_t: f64,
    },
    Star {
        base: f64,
        wobble: f64,
        wobble_phase: f64,
        spikes: Vec<(f64, f64)>,
    },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Ellipse { a, b, cos_t, sin_t } => {
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Star {
                base,
                wobble,
                wobble_phase,
                spikes,
            } => {
                let r = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx);
                let mut radius = base * (1.0 + wobble * (3.0 * phi + wobble_phase).sin());
                for &(phase, amp) in spikes {
                    let s = 0.5 * (1.0 + (phi - phase).cos());
                    radius = radius.max(base + amp * s.powi(40));
                }
                r <= radius
            }
        }
    }
}

/// Renders one lesion image; all randomness comes from `rng`.
pub fn render_lesion_image<R: Rng + ?Sized>(
    size: usize,
    label: ClassLabel,
    lesion_size: (f64, f64),
    speckle: f64,
    rng: &mut R,
) -> Result<RenderedImage> {
    if label.is_background() {
        return Err(Error::invalid("cannot render a background lesion"));
    }
    let n = size as f64;
    let background = rng.random_range(0.45..0.65);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..n),
                rng.random_range(0.0..n),
                rng.random_range(0.12 * n..0.3 * n),
                rng.random_range(-0.18..0.12),
            )
        })
        .collect();
    let layer_period = rng.random_range(0.2 * n..0.5 * n);
    let layer_phase = rng.random_range(0.0..2.0 * PI);

    let radius = 0.5 * n * rng.random_range(lesion_size.0..=lesion_size.1);
    let cx = rng.random_range(radius + 1.0..=n - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..=n - radius - 1.0);
    let shape = match label {
        ClassLabel::Class1 => {
            let t: f64 = rng.random_range(0.0..PI);
            Shape::Ellipse {
                a: radius,
                b: radius * rng.random_range(0.55..0.95),
                cos_t: t.cos(),
                sin_t: t.sin(),
            }
        }
        _ => {
            let base = radius * rng.random_range(0.62..0.8);
            let wobble = 0.08;
            let spike_count = rng.random_range(5..=9) as f64;
            let room = radius - base * (1.0 + wobble);
            let phase0 = rng.random_range(0.0..2.0 * PI);
            let spikes = (0..spike_count as usize)
                .map(|k| {
                    let phase = phase0 + 2.0 * PI * k as f64 / spike_count + rng.random_range(-0.15..0.15);
                    (phase, room * rng.random_range(0.35..1.0))
                })
                .collect();
            Shape::Star {
                base,
                wobble,
                wobble_phase: rng.random_range(0.0..2.0 * PI),
                spikes,
            }
        }
    };
    let darkening = match label {
        ClassLabel::Class1 => rng.random_range(0.10..0.24),
        _ => rng.random_range(0.12..0.26),
    };
    let lesion_level = background - darkening;

    let gamma = if speckle > 0.0 {
        let shape_k = 1.0 / (speckle * speckle);
        Some(Gamma::new(shape_k, 1.0 / shape_k).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };

    let mut pixels = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shape.contains(px - cx, py - cy);
            let clean = if inside {
                lesion_level
            } else {
                let mut v = background + 0.05 * (2.0 * PI * py / layer_period + layer_phase).sin();
                for &(bx, by, s, amp) in &blobs {
                    let d2 = (px - bx).powi(2) + (py - by).powi(2);
                    v += amp * (-d2 / (2.0 * s * s)).exp();
                }
                v
            };
            let noise = gamma.as_ref().map_or(1.0, |g| g.sample(rng));
            pixels.push((clean * noise).clamp(0.0, 1.0));
            mask.push(inside);
        }
    }
    let bbox = lesion_box_from_mask(&mask, size)
        .ok_or_else(|| Error::invalid("rendered lesion is empty"))?;
    // Quantize now so the in-memory image equals what a PNG round trip yields.
    let image = GrayImage::from_u8(size, size, &GrayImage::new(size, size, pixels)?.to_u8())?;
    Ok(RenderedImage { image, mask, bbox })
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub strong: DatasetManifest,
    pub weak: DatasetManifest,
    pub test: DatasetManifest,
    pub root: PathBuf,
}

impl SyntheticDataset {
    pub const STRONG_FILE: &'static str = "train_strong.jsonl";
    pub const WEAK_FILE: &'static str = "train_weak.jsonl";
    pub const TEST_FILE: &'static str = "test.jsonl";

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        Ok(SyntheticDataset {
            strong: DatasetManifest::load(root.join(Self::STRONG_FILE), Split::TrainStrong)?,
            weak: DatasetManifest::load(root.join(Self::WEAK_FILE), Split::TrainWeak)?,
            test: DatasetManifest::load(root.join(Self::TEST_FILE), Split::Test)?,
            root: root.to_path_buf(),
        })
    }
}

fn split_prefix(split: Split) -> &'static str {
    match split {
        Split::TrainStrong => "strong",
        Split::TrainWeak => "weak",
        Split::Test => "test",
    }
}

/// Renders every image to `out_dir/images/` and writes the three manifests.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut manifests = Vec::new();
    for (split, counts) in [
        (Split::TrainStrong, cfg.train_strong),
        (Split::TrainWeak, cfg.weak_counts()),
        (Split::Test, cfg.test),
    ] {
        let mut samples = Vec::with_capacity(counts.total());
        for label in ClassLabel::FOREGROUND {
            for k in 0..counts.get(label) {
                let image_id = format!("{}_{}_{k:04}", split_prefix(split), label);
                let mut rng = rng_for_str(cfg.seed, &image_id);
                let rendered =
                    render_lesion_image(cfg.image_size, label, cfg.lesion_size, cfg.speckle, &mut rng)?;
                let rel = format!("images/{image_id}.png");
                rendered.image.save_png(out_dir.join(&rel))?;
                let strong = split != Split::TrainWeak;
                samples.push(Sample {
                    image_id,
                    image_path: rel,
                    supervision: if strong { Supervision::Strong } else { Supervision::Weak },
                    label,
                    bbox: strong.then_some(rendered.bbox),
                    origin: Origin::Original,
                });
            }
        }
        let manifest = DatasetManifest::new(split, samples)?.with_base_dir(out_dir);
        let file = match split {
            Split::TrainStrong => SyntheticDataset::STRONG_FILE,
            Split::TrainWeak => SyntheticDataset::WEAK_FILE,
            Split::Test => SyntheticDataset::TEST_FILE,
        };
        manifest.write(out_dir.join(file))?;
        manifests.push(manifest);
    }
    let test = manifests.pop().expect("three splits");
    let weak = manifests.pop().expect("three splits");
    let strong = manifests.pop().expect("three splits");
    Ok(SyntheticDataset {
        strong,
        weak,
        test,
        root: out_dir.to_path_buf(),
    })
}
