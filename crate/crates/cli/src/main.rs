use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use weakdet::data::{generate_synthetic, DatasetManifest, Split, SyntheticConfig};
use weakdet::detector::Checkpoint;
use weakdet::harness::{
    active_round, evaluate, render_report, resume, run_schedule_study, train, write_json, write_jsonl,
    ExperimentReport, StudyConfig, TrainConfig,
};
use weakdet::schedule::AlphaSchedule;
use weakdet::{Error, Result};

#[derive(Parser)]
#[command(name = "weakdet", version, about = "Mixed-supervision lesion detector: data, training, evaluation, curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// constant | inverse_exponential | linear | polynomial-<p>
    #[arg(long)]
    schedule: Option<String>,
    /// Polynomial exponent (implies a polynomial schedule).
    #[arg(long)]
    exponent: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (images + three manifests).
    GenSynth(Overrides),
    /// Train one model; writes a step log and checkpoints.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test manifest.
    Eval {
        #[command(flatten)]
        o: Overrides,
        /// Defaults to `<out_dir>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build D_active from the weak manifest and merge it into the strong one.
    ActiveSelect {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every (schedule, seed) pair, then one active round.
    Study(Overrides),
    /// Render a study report as markdown.
    Report {
        /// `report.json` written by `study`, or the study directory.
        #[arg(long)]
        input: PathBuf,
        /// Also write the markdown here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_schedule(o: &Overrides, current: AlphaSchedule) -> Result<AlphaSchedule> {
    let mut s = match &o.schedule {
        Some(name) => name.parse()?,
        None => current,
    };
    if let Some(p) = o.exponent {
        if o.schedule.is_some() && !matches!(s, AlphaSchedule::Polynomial { .. }) {
            return Err(Error::Config(format!("--exponent does not apply to schedule {s}")));
        }
        s = AlphaSchedule::polynomial(p)?;
    }
    Ok(s)
}

fn train_config(o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.schedule = parse_schedule(o, cfg.schedule)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(t) = o.total_steps {
        cfg.total_steps = t;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn load_checkpoint(cfg: &TrainConfig, path: Option<&Path>) -> Result<weakdet::detector::Detector> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.final_checkpoint());
    Checkpoint::load(&path)?.restore()
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenSynth(o) => {
            let mut cfg: SyntheticConfig = match &o.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(s) = o.seed {
                cfg.seed = s;
            }
            let out = o.out.unwrap_or_else(|| PathBuf::from("data"));
            let ds = generate_synthetic(&cfg, &out)?;
            Ok(json!({
                "out": out,
                "train_strong": ds.strong.class_counts(),
                "train_weak": ds.weak.class_counts(),
                "test": ds.test.class_counts(),
            }))
        }
        Command::Train { o, resume: from } => {
            let cfg = train_config(&o)?;
            let outcome = match &from {
                Some(ck) => resume(&cfg, ck)?,
                None => train(&cfg)?,
            };
            Ok(json!({
                "checkpoint": outcome.checkpoint,
                "step_log": outcome.log,
                "steps_run": outcome.steps_run,
                "class_weights": outcome.class_weights,
                "wall_clock_secs": outcome.wall_clock_secs,
            }))
        }
        Command::Eval { o, checkpoint } => {
            let cfg = train_config(&o)?;
            let det = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let test_path = cfg
                .test_manifest
                .clone()
                .ok_or_else(|| Error::Config("test_manifest is required".into()))?;
            let test = DatasetManifest::load(&test_path, Split::Test)?;
            let ev = evaluate(&det, &test, cfg.eval)?;
            let dir = cfg.out_dir.join("eval");
            write_json(&dir.join("metrics.json"), &ev.report)?;
            write_jsonl(&dir.join("detections.jsonl"), &ev.dump)?;
            Ok(json!({
                "corloc": ev.report.corloc,
                "fraction_detected": ev.report.fraction_detected,
                "map": ev.report.map,
                "thresholds": ev.report.thresholds,
                "metrics": dir.join("metrics.json"),
            }))
        }
        Command::ActiveSelect { o, checkpoint } => {
            let cfg = train_config(&o)?;
            let det = load_checkpoint(&cfg, checkpoint.as_deref())?;
            let strong = DatasetManifest::load(&cfg.strong_manifest, Split::TrainStrong)?;
            let weak = DatasetManifest::load(&cfg.weak_manifest, Split::TrainWeak)?;
            let round = active_round(&det, &weak, &cfg.active, &strong)?;
            let dir = cfg.out_dir.join("active");
            round.active.manifest.write(dir.join("active.jsonl"))?;
            round.merged.write(dir.join("merged_strong.jsonl"))?;
            write_jsonl(&dir.join("curation_detections.jsonl"), &round.active.dump)?;
            write_json(&dir.join("counts.json"), &round.counts)?;
            Ok(json!({
                "active_manifest": dir.join("active.jsonl"),
                "merged_manifest": dir.join("merged_strong.jsonl"),
                "counts": round.counts,
            }))
        }
        Command::Study(o) => {
            let mut cfg = match &o.config {
                Some(p) => StudyConfig::load(p)?,
                None => StudyConfig::default(),
            };
            if o.schedule.is_some() || o.exponent.is_some() {
                cfg.schedules = vec![parse_schedule(&o, cfg.train.schedule)?];
            }
            if let Some(s) = o.seed {
                cfg.seeds = vec![s];
            }
            if let Some(t) = o.total_steps {
                cfg.train.total_steps = t;
            }
            let out = o.out.unwrap_or_else(|| cfg.train.out_dir.clone());
            let report = run_schedule_study(&cfg, &out)?;
            Ok(json!({
                "report": out.join("report.json"),
                "markdown": out.join("report.md"),
                "partial": report.partial,
            }))
        }
        Command::Report { input, out } => {
            let path = if input.is_dir() { input.join("report.json") } else { input };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let report: ExperimentReport =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let md = render_report(&report);
            print!("{md}");
            if let Some(out) = out {
                std::fs::write(&out, &md).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            }
            Ok(serde_json::Value::Null)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            match e {
                Error::Config(_) | Error::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
