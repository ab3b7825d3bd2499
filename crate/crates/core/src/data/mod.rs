//! Samples with mixed supervision, JSON-lines manifests, the synthetic generator,
//! strong-sample augmentation and the dual-stream step iterator.

mod augment;
mod image;
mod stream;
mod synth;

pub use augment::{augment_strong, flip_sample, jitter, JitterConfig};
pub use image::GrayImage;
pub use stream::{dual_stream, CyclicStream, DualStream};
pub use synth::{
    generate_synthetic, lesion_box_from_mask, render_lesion_image, ClassCounts, RenderedImage,
    SyntheticConfig, SyntheticDataset,
};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BoundingBox, ClassLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Strong,
    Weak,
}

/// Where a strong annotation came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Original,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainStrong,
    TrainWeak,
    Test,
}

/// One image record. `bbox` is present exactly when supervision is strong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    pub image_path: String,
    pub supervision: Supervision,
    pub label: ClassLabel,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default)]
    pub origin: Origin,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::Validation {
                sample: self.image_id.clone(),
                message: message.to_string(),
            })
        };
        if self.image_id.is_empty() {
            return fail("empty image_id");
        }
        if self.label.is_background() {
            return fail("label must not be background");
        }
        match (self.supervision, &self.bbox) {
            (Supervision::Strong, None) => return fail("strong sample without box"),
            (Supervision::Weak, Some(_)) => return fail("weak sample carries a box"),
            _ => {}
        }
        if let Some(b) = &self.bbox {
            if b.x_min() < 0.0 || b.y_min() < 0.0 {
                return fail("box outside image bounds");
            }
        }
        if self.origin == Origin::Active && self.supervision != Supervision::Strong {
            return fail("active samples must be strong");
        }
        Ok(())
    }

    /// Checks the box against the actual image extent.
    pub fn validate_bounds(&self, width: usize, height: usize) -> Result<()> {
        if let Some(b) = &self.bbox {
            if !b.within(width as f64, height as f64) {
                return Err(Error::Validation {
                    sample: self.image_id.clone(),
                    message: format!("box {:?} outside {width}x{height} image", b.to_array()),
                });
            }
        }
        Ok(())
    }

    pub fn annotation(&self) -> Option<Annotation> {
        self.bbox.map(|bbox| Annotation {
            bbox,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    split: Split,
    samples: Vec<Sample>,
    class_counts: BTreeMap<ClassLabel, usize>,
    base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if split == Split::Test && s.supervision != Supervision::Strong {
                return Err(Error::Validation {
                    sample: s.image_id.clone(),
                    message: "test split accepts only strong samples".into(),
                });
            }
            if split == Split::TrainStrong && s.supervision != Supervision::Strong {
                return Err(Error::Validation {
                    sample: s.image_id.clone(),
                    message: "train_strong split accepts only strong samples".into(),
                });
            }
            if split == Split::TrainWeak && s.supervision != Supervision::Weak {
                return Err(Error::Validation {
                    sample: s.image_id.clone(),
                    message: "train_weak split accepts only weak samples".into(),
                });
            }
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::Validation {
                    sample: s.image_id.clone(),
                    message: "duplicate image_id".into(),
                });
            }
        }
        let class_counts = count_classes(&samples);
        Ok(DatasetManifest {
            split,
            samples,
            class_counts,
            base_dir: None,
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<ClassLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn origin_counts(&self) -> BTreeMap<Origin, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.origin).or_insert(0) += 1;
        }
        m
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Absolute-or-relative image path resolved against the manifest directory.
    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        let p = Path::new(&sample.image_path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Appends `other`'s samples; image paths of `other` are rewritten to stay resolvable.
    pub fn concat(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        let mut samples = self.samples.clone();
        for s in &other.samples {
            let mut s = s.clone();
            let resolved = other.image_path(&s);
            s.image_path = rebase(&resolved, self.base_dir.as_deref());
            samples.push(s);
        }
        let mut merged = DatasetManifest::new(self.split, samples)?;
        merged.base_dir = self.base_dir.clone();
        Ok(merged)
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push(sample);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest::new(split, samples)?.with_base_dir(base))
    }

    /// Writes one JSON record per line. Relative image paths are rebased onto the
    /// destination directory so the written manifest resolves the same files.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dest_dir = path.parent().map(Path::to_path_buf);
        if let Some(dir) = &dest_dir {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let mut s = s.clone();
            if self.base_dir.is_some() && Path::new(&s.image_path).is_relative() {
                s.image_path = rebase(&self.image_path(&s), dest_dir.as_deref());
            }
            let line = serde_json::to_string(&s).expect("sample serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn count_classes(samples: &[Sample]) -> BTreeMap<ClassLabel, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.label).or_insert(0) += 1;
    }
    counts
}

fn rebase(path: &Path, base: Option<&Path>) -> String {
    match base {
        Some(b) if !b.as_os_str().is_empty() => match path.strip_prefix(b) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => absolute(path).to_string_lossy().into_owned(),
        },
        _ => path.to_string_lossy().into_owned(),
    }
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|d| d.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}
