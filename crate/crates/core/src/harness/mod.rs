//! Training loop, checkpoint/resume, evaluation, the active round and the
//! schedule study.

mod study;

pub use study::{
    active_retrain, best_run, render_report, run_schedule_study, ActiveComparison, ExperimentReport, MetricSummary, RunResult, StudyConfig,
    StudyRow,
};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{build_active_set, ActiveConfig, ActiveSet, ImageDetections};
use crate::data::{augment_strong, DatasetManifest, DualStream, GrayImage, JitterConfig, Origin, Sample, Split};
use crate::detector::{Adam, AdamConfig, Checkpoint, Detector, DetectorConfig, ProposalMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, EvalThresholds, MetricsReport};
use crate::geometry::{Annotation, ClassLabel};
use crate::rng::{derive_seed_str, rng_for};
use crate::schedule::AlphaSchedule;
use crate::weak::{class_weights, select_weak_target, weak_loss_grad, ClassWeights};

pub const STEP_LOG: &str = "steps.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strong_manifest: PathBuf,
    pub weak_manifest: PathBuf,
    /// Used by `eval` and the study; training ignores it.
    pub test_manifest: Option<PathBuf>,
    pub total_steps: u64,
    pub schedule: AlphaSchedule,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub class_weighting: bool,
    /// Horizontal flip copies plus brightness/contrast jitter on strong images.
    pub augmentation: bool,
    pub jitter: JitterConfig,
    /// Intermediate checkpoint cadence in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub eval: EvalThresholds,
    pub active: ActiveConfig,
    /// Initial weights instead of a fresh initialization.
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strong_manifest: PathBuf::from("data/train_strong.jsonl"),
            weak_manifest: PathBuf::from("data/train_weak.jsonl"),
            test_manifest: Some(PathBuf::from("data/test.jsonl")),
            total_steps: 2000,
            schedule: AlphaSchedule::Polynomial { exponent: 16 },
            optimizer: AdamConfig::default(),
            seed: 0,
            detector: DetectorConfig::default(),
            class_weighting: true,
            augmentation: true,
            jitter: JitterConfig::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/default"),
            eval: EvalThresholds::default(),
            active: ActiveConfig::default(),
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if let AlphaSchedule::Polynomial { exponent: 0 } = self.schedule {
            return Err(Error::Config("polynomial exponent must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.detector.validate()?;
        for p in [&self.strong_manifest, &self.weak_manifest] {
            if !p.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", p.display())));
            }
        }
        if self.jitter.brightness < 0.0 || self.jitter.contrast < 0.0 || self.jitter.contrast >= 1.0 {
            return Err(Error::Config("jitter magnitudes out of range".into()));
        }
        Ok(())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(STEP_LOG)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(FINAL_CHECKPOINT)
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub alpha: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub weak: f64,
    pub total: f64,
    pub strong_id: String,
    pub flipped: bool,
    pub weak_id: String,
    pub weak_rois: usize,
    pub positive_index: Option<usize>,
    pub negative_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_run: u64,
    pub class_weights: ClassWeights,
    pub wall_clock_secs: f64,
}

struct TrainData {
    strong: Vec<(Sample, GrayImage)>,
    weak: Vec<(Sample, GrayImage)>,
}

fn load_images(m: &DatasetManifest, size: usize) -> Result<Vec<(Sample, GrayImage)>> {
    m.samples()
        .iter()
        .map(|s| {
            let img = GrayImage::load_png(m.image_path(s))?;
            if img.width() != size || img.height() != size {
                return Err(Error::Validation {
                    sample: s.image_id.clone(),
                    message: format!("image is {}x{}, detector expects {size}x{size}", img.width(), img.height()),
                });
            }
            s.validate_bounds(img.width(), img.height())?;
            Ok((s.clone(), img))
        })
        .collect()
}

/// Trains a fresh run from step 1.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training(cfg, None)
}

/// Continues a run from a checkpoint written by [`train`] with the same config.
pub fn resume(cfg: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    run_training(cfg, Some(checkpoint))
}

fn compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        out_dir: PathBuf::new(),
        checkpoint_every: 0,
        test_manifest: None,
        eval: EvalThresholds::default(),
        active: ActiveConfig::default(),
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn run_training(cfg: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let strong = DatasetManifest::load(&cfg.strong_manifest, Split::TrainStrong)?;
    let weak = DatasetManifest::load(&cfg.weak_manifest, Split::TrainWeak)?;
    if strong.is_empty() || weak.is_empty() {
        return Err(Error::Config("strong and weak manifests must be non-empty".into()));
    }
    let weights = if cfg.class_weighting {
        class_weights(&weak)?
    } else {
        ClassWeights::UNIT
    };
    let size = cfg.detector.image_size;
    let data = TrainData {
        strong: load_images(&strong, size)?,
        weak: load_images(&weak, size)?,
    };
    let copies = if cfg.augmentation { 2 } else { 1 };

    let (mut det, mut adam, start) = match resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let saved: TrainConfig = serde_json::from_value(ck.meta.clone())
                .map_err(|e| Error::Checkpoint(format!("config echo unreadable: {e}")))?;
            if !compatible(&saved, cfg) {
                return Err(Error::Checkpoint("checkpoint was written with a different training config".into()));
            }
            let det = ck.restore()?;
            let adam = ck
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            if ck.step > cfg.total_steps {
                return Err(Error::Checkpoint("checkpoint is past total_steps".into()));
            }
            (det, adam, ck.step)
        }
        None => {
            let det = match &cfg.warm_start {
                Some(p) => {
                    let det = Checkpoint::load(p)?.restore()?;
                    if det.config() != &cfg.detector {
                        return Err(Error::Checkpoint("warm-start checkpoint has a different architecture".into()));
                    }
                    det
                }
                None => Detector::new(cfg.detector.clone(), derive_seed_str(cfg.seed, "init"))?,
            };
            let adam = Adam::new(cfg.optimizer, &det);
            (det, adam, 0)
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.log_path();
    prepare_log(&log_path, start)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    let mut stream = DualStream::new(data.strong.len() * copies, data.weak.len(), cfg.seed)?;
    stream.skip_steps(start as usize);
    let step_seed = derive_seed_str(cfg.seed, "step");

    for step in start + 1..=cfg.total_steps {
        let (si, wi) = stream.next().expect("endless stream");
        let alpha = cfg.schedule.alpha_at(step, cfg.total_steps)?;
        let mut rng = rng_for(step_seed, step);

        let (sample, image) = &data.strong[si / copies];
        let flipped = si % copies == 1;
        let jitter = if cfg.augmentation { cfg.jitter } else { JitterConfig::none() };
        let (sample, image) = augment_strong(sample, image, flipped, jitter, &mut rng)?;
        let gt = sample.annotation().expect("strong sample has a box");

        det.zero_grad();
        let (strong_losses, _) = det.strong_pass(&image, &gt, None, &mut rng, Some([1.0; 4]))?;

        let (weak_sample, weak_image) = &data.weak[wi];
        let fwd = det.forward_image(weak_image, ProposalMode::Train)?;
        let (weak_value, pos, neg) = match &fwd.scores {
            Some(scores) => {
                let target = select_weak_target(scores, weak_sample.label, weights)?;
                let (value, grads) = weak_loss_grad(scores, &target);
                let rows: Vec<usize> = grads.iter().map(|(r, _)| *r).collect();
                let scaled: Vec<[f64; 3]> = grads.iter().map(|(_, g)| g.map(|v| v * alpha)).collect();
                det.backward_rows(&fwd, &rows, &scaled);
                (value, Some(target.positive_index), target.negative_index)
            }
            None => (0.0, None, None),
        };

        let record = StepRecord {
            step,
            alpha,
            rpn_cls: strong_losses.rpn_cls,
            rpn_reg: strong_losses.rpn_reg,
            head_cls: strong_losses.head_cls,
            head_reg: strong_losses.head_reg,
            weak: weak_value,
            total: crate::weak::combined_loss(&strong_losses, weak_value, alpha),
            strong_id: sample.image_id.clone(),
            flipped,
            weak_id: weak_sample.image_id.clone(),
            weak_rois: fwd.proposals.len(),
            positive_index: pos,
            negative_index: neg,
        };
        if !record.total.is_finite() || det.flat_grads().iter().any(|g| !g.is_finite()) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let snap = cfg.out_dir.join(format!("nonfinite_step_{step}.ckpt"));
            Checkpoint::capture(&det, step - 1, cfg.echo(), Some(&adam)).save(&snap)?;
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "{}; parameters before the update saved to {}",
                    serde_json::to_string(&record).expect("record serializes"),
                    snap.display()
                ),
            });
        }
        adam.step(&mut det);
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = cfg.out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"));
            Checkpoint::capture(&det, step, cfg.echo(), Some(&adam)).save(&path)?;
        }
        if step % 100 == 0 {
            log::info!("step {step}/{}: total {:.4} alpha {alpha:.4}", cfg.total_steps, record.total);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = cfg.final_checkpoint();
    Checkpoint::capture(&det, cfg.total_steps, cfg.echo(), Some(&adam)).save(&checkpoint)?;
    Ok(TrainOutcome {
        detector: det,
        checkpoint,
        log: log_path,
        steps_run: cfg.total_steps - start,
        class_weights: weights,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Keeps log rows up to `keep` (all rows are dropped for a fresh run).
fn prepare_log(path: &Path, keep: u64) -> Result<()> {
    if keep == 0 || !path.exists() {
        return File::create(path).map(|_| ()).map_err(|e| Error::io(path, e));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.step <= keep {
            kept.push(line);
        }
    }
    let mut out = String::new();
    for l in kept {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Detections on every test image plus the metrics computed from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub dump: Vec<ImageDetections>,
}

pub fn evaluate(det: &Detector, test: &DatasetManifest, thresholds: EvalThresholds) -> Result<Evaluation> {
    if test.split() != Split::Test {
        return Err(Error::invalid("evaluation needs a test manifest"));
    }
    let floor = thresholds.map_score.min(thresholds.corloc_score);
    let mut ids = Vec::with_capacity(test.len());
    let mut dets = Vec::with_capacity(test.len());
    let mut gts: Vec<Annotation> = Vec::with_capacity(test.len());
    for s in test.samples() {
        let img = GrayImage::load_png(test.image_path(s))?;
        let d = det.detect(&img, floor)?;
        ids.push(s.image_id.clone());
        gts.push(s.annotation().ok_or_else(|| Error::Validation {
            sample: s.image_id.clone(),
            message: "test sample has no ground truth".into(),
        })?);
        dets.push(d);
    }
    let report = evaluate_detections(&ids, &dets, &gts, thresholds)?;
    let dump = ids
        .into_iter()
        .zip(dets)
        .map(|(image_id, detections)| ImageDetections { image_id, detections })
        .collect();
    Ok(Evaluation { report, dump })
}

pub fn evaluate_checkpoint(checkpoint: &Path, test: &DatasetManifest, thresholds: EvalThresholds) -> Result<Evaluation> {
    let det = Checkpoint::load(checkpoint)?.restore()?;
    evaluate(&det, test, thresholds)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveCounts {
    pub active: usize,
    pub active_by_class: std::collections::BTreeMap<ClassLabel, usize>,
    pub merged: usize,
    pub merged_by_origin: std::collections::BTreeMap<Origin, usize>,
    pub double_predictions: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRound {
    pub active: ActiveSet,
    pub merged: DatasetManifest,
    pub counts: ActiveCounts,
}

/// Builds D_active from the weak set and appends it to the strong set.
pub fn active_round(det: &Detector, weak: &DatasetManifest, cfg: &ActiveConfig, strong: &DatasetManifest) -> Result<ActiveRound> {
    let active = build_active_set(det, weak, cfg)?;
    if active.manifest.is_empty() {
        log::warn!("active round produced no annotations; strong set passes through unchanged");
    }
    let merged = strong.concat(&active.manifest)?;
    let counts = ActiveCounts {
        active: active.manifest.len(),
        active_by_class: active.manifest.class_counts().clone(),
        merged: merged.len(),
        merged_by_origin: merged.origin_counts(),
        double_predictions: active.pairs.len(),
        skipped: active.skipped.len(),
    };
    Ok(ActiveRound { active, merged, counts })
}
