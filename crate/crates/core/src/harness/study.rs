use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{active_round, evaluate, train, write_json, write_jsonl, ActiveCounts, TrainConfig};
use crate::data::{DatasetManifest, Split};
use crate::detector::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::schedule::AlphaSchedule;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub train: TrainConfig,
    pub schedules: Vec<AlphaSchedule>,
    pub seeds: Vec<u64>,
    /// Run one active round on the best schedule and retrain from scratch.
    pub active_round: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            train: TrainConfig::default(),
            schedules: AlphaSchedule::PUBLISHED.to_vec(),
            seeds: vec![0, 1, 2],
            active_round: true,
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MetricSummary {
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schedule: AlphaSchedule,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: MetricsReport,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub schedule: AlphaSchedule,
    pub name: String,
    pub formula: String,
    pub runs: Vec<RunResult>,
    pub corloc: Option<MetricSummary>,
    pub fraction_detected: Option<MetricSummary>,
    pub map: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveComparison {
    pub schedule: AlphaSchedule,
    pub seed: u64,
    pub counts: ActiveCounts,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub merged_manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<StudyRow>,
    pub active: Option<ActiveComparison>,
    /// Set when at least one run failed; `failures` names them.
    pub partial: bool,
    pub failures: Vec<String>,
    pub config: StudyConfig,
    pub wall_clock_secs: f64,
}

fn run_dir(root: &Path, schedule: AlphaSchedule, seed: u64) -> PathBuf {
    root.join(schedule.to_string()).join(format!("seed_{seed}"))
}

fn train_and_evaluate(cfg: &TrainConfig, test: &DatasetManifest) -> Result<RunResult> {
    let outcome = train(cfg)?;
    let eval = evaluate(&outcome.detector, test, cfg.eval)?;
    write_json(&cfg.out_dir.join("metrics.json"), &eval.report)?;
    write_jsonl(&cfg.out_dir.join("detections.jsonl"), &eval.dump)?;
    Ok(RunResult {
        schedule: cfg.schedule,
        seed: cfg.seed,
        out_dir: cfg.out_dir.clone(),
        checkpoint: outcome.checkpoint,
        metrics: eval.report,
        wall_clock_secs: outcome.wall_clock_secs,
    })
}

fn test_manifest(cfg: &TrainConfig) -> Result<DatasetManifest> {
    let path = cfg
        .test_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("test_manifest is required for evaluation".into()))?;
    DatasetManifest::load(path, Split::Test)
}

/// One active round from `checkpoint`, then a from-scratch retrain on the merged
/// strong set with the same schedule and seed (`warm_start` in `cfg` is honoured).
pub fn active_retrain(cfg: &TrainConfig, checkpoint: &Path, out_dir: &Path) -> Result<ActiveComparison> {
    let test = test_manifest(cfg)?;
    let det = Checkpoint::load(checkpoint)?.restore()?;
    let before = evaluate(&det, &test, cfg.eval)?.report;
    let strong = DatasetManifest::load(&cfg.strong_manifest, Split::TrainStrong)?;
    let weak = DatasetManifest::load(&cfg.weak_manifest, Split::TrainWeak)?;
    let round = active_round(&det, &weak, &cfg.active, &strong)?;
    let merged_path = out_dir.join("merged_strong.jsonl");
    round.merged.write(&merged_path)?;
    round.active.manifest.write(out_dir.join("active.jsonl"))?;
    write_jsonl(&out_dir.join("curation_detections.jsonl"), &round.active.dump)?;

    let retrain_cfg = TrainConfig {
        strong_manifest: merged_path.clone(),
        out_dir: out_dir.join("retrain"),
        ..cfg.clone()
    };
    let after = train_and_evaluate(&retrain_cfg, &test)?.metrics;
    Ok(ActiveComparison {
        schedule: cfg.schedule,
        seed: cfg.seed,
        counts: round.counts,
        before,
        after,
        merged_manifest: merged_path,
    })
}

/// Trains and evaluates every (schedule, seed) pair, rows in the published order.
pub fn run_schedule_study(cfg: &StudyConfig, out_dir: &Path) -> Result<ExperimentReport> {
    if cfg.schedules.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("study needs at least one schedule and one seed".into()));
    }
    let started = Instant::now();
    let test = test_manifest(&cfg.train)?;
    let mut schedules = cfg.schedules.clone();
    schedules.sort_by_key(|s| s.order_key());
    schedules.dedup();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for schedule in schedules {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let run_cfg = TrainConfig {
                schedule,
                seed,
                out_dir: run_dir(out_dir, schedule, seed),
                ..cfg.train.clone()
            };
            log::info!("training {schedule} seed {seed}");
            match train_and_evaluate(&run_cfg, &test) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    log::error!("run {schedule} seed {seed} failed: {e}");
                    failures.push(format!("{schedule} seed {seed}: {e}"));
                }
            }
        }
        let pick = |f: fn(&MetricsReport) -> Option<f64>| {
            MetricSummary::of(&runs.iter().filter_map(|r| f(&r.metrics)).collect::<Vec<_>>())
        };
        rows.push(StudyRow {
            schedule,
            name: schedule.to_string(),
            formula: schedule.formula(),
            corloc: pick(|m| Some(m.corloc)),
            fraction_detected: pick(|m| Some(m.fraction_detected)),
            map: pick(|m| m.map),
            runs,
        });
    }

    let active = if cfg.active_round {
        match best_run(&rows) {
            Some(best) => {
                let run_cfg = TrainConfig {
                    schedule: best.schedule,
                    seed: best.seed,
                    ..cfg.train.clone()
                };
                Some(active_retrain(&run_cfg, &best.checkpoint, &out_dir.join("active"))?)
            }
            None => None,
        }
    } else {
        None
    };

    let report = ExperimentReport {
        partial: !failures.is_empty(),
        rows,
        active,
        failures,
        config: cfg.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    std::fs::write(out_dir.join(REPORT_MD), render_report(&report)).map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}

/// Highest-CorLoc run of the schedule with the highest mean CorLoc; earlier rows
/// and earlier seeds win ties.
pub fn best_run(rows: &[StudyRow]) -> Option<&RunResult> {
    let mut best_row: Option<&StudyRow> = None;
    for row in rows {
        let Some(c) = row.corloc else { continue };
        if best_row.is_none_or(|b| c.mean > b.corloc.map_or(f64::NEG_INFINITY, |s| s.mean)) {
            best_row = Some(row);
        }
    }
    let mut best: Option<&RunResult> = None;
    for r in &best_row?.runs {
        if best.is_none_or(|b| r.metrics.corloc > b.metrics.corloc) {
            best = Some(r);
        }
    }
    best
}

fn cell(s: &Option<MetricSummary>) -> String {
    match s {
        Some(m) if m.std > 0.0 => format!("{:.2} ± {:.2}", m.mean, m.std),
        Some(m) => format!("{:.2}", m.mean),
        None => "n/a".into(),
    }
}

/// Markdown rendering of a study report.
pub fn render_report(r: &ExperimentReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = r.config.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "# Schedule study\n");
    let _ = writeln!(
        out,
        "{} steps per run, seeds {}, CorLoc/fraction at score >= {}, mAP at score >= {} ({:?}).\n",
        r.config.train.total_steps,
        seeds.join(", "),
        r.config.train.eval.corloc_score,
        r.config.train.eval.map_score,
        r.config.train.eval.ap_convention,
    );
    let _ = writeln!(out, "| schedule | formula | CorLoc (%) | fraction detected (%) | mAP (%) |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "| {} | `{}` | {} | {} | {} |",
            row.name,
            row.formula,
            cell(&row.corloc),
            cell(&row.fraction_detected),
            cell(&row.map)
        );
    }
    if let Some(a) = &r.active {
        let _ = writeln!(out, "\n## Active round ({} seed {})\n", a.schedule, a.seed);
        let by_class: Vec<String> = a.counts.active_by_class.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        let _ = writeln!(
            out,
            "{} pseudo-annotated images ({}), merged strong set {}.\n",
            a.counts.active,
            if by_class.is_empty() { "none".to_string() } else { by_class.join(", ") },
            a.counts.merged
        );
        let _ = writeln!(out, "| | CorLoc (%) | fraction detected (%) | mAP (%) |");
        let _ = writeln!(out, "|---|---|---|---|");
        for (name, m) in [("before", &a.before), ("after", &a.after)] {
            let map = m.map.map_or("n/a".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(out, "| {name} | {:.2} | {:.2} | {map} |", m.corloc, m.fraction_detected);
        }
    }
    if r.partial {
        let _ = writeln!(out, "\n**Partial report.** Failed runs:\n");
        for f in &r.failures {
            let _ = writeln!(out, "- {f}");
        }
    }
    let _ = writeln!(out, "\nWall clock: {:.0} s", r.wall_clock_secs);
    out
}
