//! The five pipeline stages: generate, train-base, probe, finetune, report.
//!
//! Run directory layout:
//!
//! ```text
//! config.json
//! data/{task}.{split}.tsv, data/manifest.json
//! base/model.ckpt, base/train_log.json, base/train_log.csv
//! probe/{task}/curve.csv, gap.json, responses.csv, plot.csv
//! finetune/plan.json
//! finetune/{config}/{task}/model.ckpt, result.json, timing.json, ...
//! report/report.json, report/summary.csv, report/timing.csv
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plab_core::finetune::{
    effective_budget, plan_schedule, run_finetune, segment_series, LayerGroupPlan, TuneConfig,
};
use plab_core::init::derive_seed;
use plab_core::model::Model;
use plab_core::probing::{assemble_curve, probe_cell, LayerAccuracyCurve, TokenType};
use plab_core::response::{anls_eval, gap, response_accuracy, GapReport, ResponseEval};
use plab_core::taskgen::{
    filter_hard, generate, generate_excluding, Dataset, Split, TaskKind,
};
use plab_core::tensor::Precision;
use plab_core::train::{train_base, BaseTrainLog};
use plab_core::Real;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::io::{self, atomic_write, fmt_num, read_json, sha256_hex, write_json};
use crate::parallel::{self, par_map, ParallelResponder};
use crate::report::{is_timing_artifact, timing_csv, JobResult, JobTiming, RunReport, TaskBaseline};
use crate::{Error, Result};

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn dataset(&self, kind: TaskKind, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{kind}.{}.tsv", split.tag()))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base/model.ckpt")
    }
    pub fn probe_dir(&self, kind: TaskKind) -> PathBuf {
        self.root.join("probe").join(kind.tag())
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("finetune/plan.json")
    }
    pub fn job_dir(&self, config: TuneConfig, kind: TaskKind) -> PathBuf {
        self.root.join("finetune").join(config.slug()).join(kind.tag())
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: TaskKind,
    pub split: Split,
    pub count: usize,
    pub positives: Option<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_px: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Writes every task's train/test (and validation) files plus a manifest.
/// Test and validation samples never repeat a training sample.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.out_dir);
    write_json(&paths.config(), cfg)?;
    let tg = cfg.taskgen();
    let per_task = par_map(&cfg.tasks, cfg.workers, |t| -> Result<Vec<Dataset>> {
        let train = generate(t.kind, t.n_train, cfg.seed, Split::Train, &tg)?;
        let mut seen: BTreeSet<u64> = train.samples.iter().map(|s| s.digest()).collect();
        let test = generate_excluding(t.kind, t.n_test, cfg.seed, Split::Test, &tg, &seen)?;
        let mut out = vec![train, test];
        if t.kind.is_binary() {
            seen.extend(out[1].samples.iter().map(|s| s.digest()));
            out.push(generate_excluding(t.kind, cfg.n_val, cfg.seed, Split::Val, &tg, &seen)?);
        }
        Ok(out)
    })?;
    let mut entries = Vec::new();
    for ds in per_task.iter().flatten() {
        let text = io::dataset_text(ds)?;
        let path = paths.dataset(ds.kind, ds.split);
        atomic_write(&path, text.as_bytes())?;
        entries.push(ManifestEntry {
            file: paths.rel(&path),
            kind: ds.kind,
            split: ds.split,
            count: ds.len(),
            positives: ds.kind.is_binary().then(|| ds.positives()),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        image_px: cfg.model.image_px,
        entries,
    };
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(cfg: &ExperimentConfig, kind: TaskKind, split: Split) -> Result<Dataset> {
    let path = Paths::new(&cfg.out_dir).dataset(kind, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::at(&path, e))?;
    let ds = io::parse_dataset(&text, split, cfg.seed)?;
    if ds.kind != kind {
        return Err(Error::Format(format!("{} holds {} samples", path.display(), ds.kind)));
    }
    if ds.samples.first().is_some_and(|s| s.image.size() != cfg.model.image_px) {
        return Err(Error::Config(format!(
            "{} was generated for a different image size",
            path.display()
        )));
    }
    Ok(ds)
}

fn model_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "model")
}

/// Probe seed of one task; shared by the base sweep and every re-probe.
pub fn probe_seed(cfg: &ExperimentConfig, kind: TaskKind) -> u64 {
    derive_seed(cfg.seed, &format!("probe/{kind}"))
}

/// Jointly trains a fresh model on every task and writes the checkpoint
/// and training log. Missing the accuracy band is reported in the log, not
/// as an error.
pub fn cmd_train_base(cfg: &ExperimentConfig) -> Result<BaseTrainLog> {
    match cfg.precision {
        Precision::F32 => train_base_as::<f32>(cfg),
        Precision::F64 => train_base_as::<f64>(cfg),
    }
}

fn train_base_as<T: Real>(cfg: &ExperimentConfig) -> Result<BaseTrainLog> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.out_dir);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for t in &cfg.tasks {
        train.push(load_dataset(cfg, t.kind, Split::Train)?);
        if t.kind.is_binary() {
            val.push(load_dataset(cfg, t.kind, Split::Val)?);
        }
    }
    let mut model = Model::<T>::new(cfg.model, model_seed(cfg))?;
    let log = train_base(&mut model, &train, &val, &cfg.base_train, cfg.seed)?;
    io::save_checkpoint(&paths.base_checkpoint(), &model)?;
    write_json(&paths.root.join("base/train_log.json"), &log)?;
    let kinds: Vec<TaskKind> = val.iter().map(|v| v.kind).collect();
    let mut header = vec!["step".to_string(), "epoch".into(), "train_loss".into()];
    header.extend(kinds.iter().map(|k| format!("val_{k}")));
    header.push("in_band".into());
    let rows: Vec<Vec<String>> = log
        .checks
        .iter()
        .map(|c| {
            let mut r = vec![c.step.to_string(), c.epoch.to_string(), fmt_num(c.train_loss)];
            r.extend(c.accuracy.iter().map(|a| fmt_num(a.1)));
            r.push(c.in_band.to_string());
            r
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    atomic_write(&paths.root.join("base/train_log.csv"), &io::table_csv(&header_refs, &rows)?)?;
    Ok(log)
}

/// Curve, response accuracy and gap of one model on one binary task.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub curve: LayerAccuracyCurve,
    pub responses: ResponseEval,
    pub gap: GapReport,
    pub forward_passes: usize,
}

/// Extracts features once per sample, trains every (layer, token type)
/// probe and measures response accuracy on the test split.
pub fn probe_model<T: Real>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ProbeOutcome> {
    let seed = probe_seed(cfg, train.kind);
    let tr = parallel::extract_features(model, train, cfg.workers)?;
    let te = parallel::extract_features(model, test, cfg.workers)?;
    let cells: Vec<(usize, TokenType)> = (0..model.config().n_layers)
        .flat_map(|l| TokenType::ALL.map(|t| (l, t)))
        .collect();
    let cells = par_map(&cells, cfg.workers, |&(l, t)| probe_cell(&tr, &te, l, t, seed, &cfg.probe))?;
    let curve = assemble_curve(
        train.kind,
        seed,
        model.config().n_layers,
        test.len(),
        format!("{}/{}", train.kind, cfg.seed),
        cells,
    )?;
    let responder = ParallelResponder {
        model,
        workers: cfg.workers,
    };
    let responses = response_accuracy(&responder, test)?;
    let gap = gap(&curve, responses.a_resp, TokenType::Last)?;
    Ok(ProbeOutcome {
        curve,
        responses,
        gap,
        forward_passes: tr.forward_passes + te.forward_passes,
    })
}

fn write_probe_outputs(dir: &Path, o: &ProbeOutcome) -> Result<Vec<PathBuf>> {
    let files = vec![
        dir.join("curve.csv"),
        dir.join("gap.json"),
        dir.join("responses.csv"),
        dir.join("plot.csv"),
    ];
    atomic_write(&files[0], &io::curve_csv(&o.curve)?)?;
    io::write_gap(&files[1], &o.gap)?;
    atomic_write(&files[2], &io::responses_csv(&o.responses.records)?)?;
    atomic_write(&files[3], &io::plot_csv(&o.curve, o.responses.a_resp)?)?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub task: TaskKind,
    pub split: Split,
    pub total: usize,
    pub incorrect: usize,
    pub kept: usize,
    pub retention: f64,
}

/// Probe datasets of a task, hard-filtered when a reference model is set.
fn probe_sets(cfg: &ExperimentConfig, kind: TaskKind) -> Result<(Dataset, Dataset, Vec<FilterStats>)> {
    let train = load_dataset(cfg, kind, Split::Train)?;
    let test = load_dataset(cfg, kind, Split::Test)?;
    let Some(reference) = &cfg.filter_reference else {
        return Ok((train, test, Vec::new()));
    };
    let model = io::load_checkpoint::<f64>(reference)?;
    let responder = ParallelResponder {
        model: &model,
        workers: cfg.workers,
    };
    let mut stats = Vec::new();
    let mut out = Vec::new();
    for ds in [train, test] {
        let r = filter_hard(&ds, &responder)?;
        stats.push(FilterStats {
            task: kind,
            split: ds.split,
            total: r.total,
            incorrect: r.incorrect,
            kept: r.dataset.len(),
            retention: r.retention,
        });
        out.push(r.dataset);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test, stats))
}

/// Probes the base checkpoint on every binary task.
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<Vec<(TaskKind, GapReport)>> {
    match cfg.precision {
        Precision::F32 => probe_as::<f32>(cfg),
        Precision::F64 => probe_as::<f64>(cfg),
    }
}

fn probe_as<T: Real>(cfg: &ExperimentConfig) -> Result<Vec<(TaskKind, GapReport)>> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.out_dir);
    let model: Model<T> = io::load_checkpoint(&paths.base_checkpoint())?;
    let mut out = Vec::new();
    for kind in cfg.binary_tasks() {
        let (train, test, stats) = probe_sets(cfg, kind)?;
        let o = probe_model(&model, &train, &test, cfg)?;
        let dir = paths.probe_dir(kind);
        write_probe_outputs(&dir, &o)?;
        if !stats.is_empty() {
            write_json(&dir.join("filter.json"), &stats)?;
        }
        out.push((kind, o.gap));
    }
    Ok(out)
}

/// Segmentation from the manual override, else from the mean last-token
/// curve of the probed tasks.
pub fn layer_plan(cfg: &ExperimentConfig) -> Result<LayerGroupPlan> {
    if let Some((l1, l2)) = cfg.finetune.boundaries {
        return Ok(LayerGroupPlan::from_boundaries(l1, l2, cfg.model.n_layers)?);
    }
    let paths = Paths::new(&cfg.out_dir);
    let mut mean = vec![0.0; cfg.model.n_layers];
    let tasks = cfg.binary_tasks();
    for &kind in &tasks {
        let path = paths.probe_dir(kind).join("curve.csv");
        let bytes = fs::read(&path).map_err(|e| Error::at(&path, e))?;
        let series = io::parse_curve_csv(&bytes)?.series(TokenType::Last);
        if series.len() != mean.len() {
            return Err(Error::Format(format!("{} has the wrong layer count", path.display())));
        }
        for (m, a) in mean.iter_mut().zip(series) {
            *m += a / tasks.len() as f64;
        }
    }
    Ok(segment_series(&mean)?)
}

/// Fine-tunes every requested configuration on every requested task from
/// the base checkpoint, evaluates each result and writes the run report.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<RunReport> {
    match cfg.precision {
        Precision::F32 => finetune_as::<f32>(cfg),
        Precision::F64 => finetune_as::<f64>(cfg),
    }
}

fn finetune_as<T: Real>(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.out_dir);
    let base: Model<T> = io::load_checkpoint(&paths.base_checkpoint())?;
    let plan = layer_plan(cfg)?;
    write_json(&paths.plan(), &plan)?;
    let jobs: Vec<(TuneConfig, TaskKind)> = cfg
        .finetune
        .configs
        .iter()
        .flat_map(|&c| cfg.finetune.tasks.iter().map(move |&k| (c, k)))
        .collect();
    // Jobs run one after another; each job spreads its own evaluation over
    // the workers.
    for &(config, kind) in &jobs {
        run_job(cfg, &paths, &base, &plan, config, kind)?;
    }
    cmd_report(cfg)
}

fn run_job<T: Real>(
    cfg: &ExperimentConfig,
    paths: &Paths,
    base: &Model<T>,
    plan: &LayerGroupPlan,
    config: TuneConfig,
    kind: TaskKind,
) -> Result<JobResult> {
    let hyper = if kind.is_binary() {
        cfg.finetune.classification
    } else {
        cfg.finetune.doc_qa
    };
    let sched = plan_schedule(config, plan, hyper.epochs)?;
    let train = load_dataset(cfg, kind, Split::Train)?;
    let test = load_dataset(cfg, kind, Split::Test)?;
    let mut model = base.clone();
    let t0 = Instant::now();
    let mut clock = || t0.elapsed().as_secs_f64();
    let run = run_finetune(
        &mut model,
        &train,
        &sched,
        &hyper,
        derive_seed(cfg.seed, &format!("finetune/{kind}")),
        &mut clock,
    )?;
    let dir = paths.job_dir(config, kind);
    let mut artifacts = vec![dir.join("model.ckpt")];
    io::save_checkpoint(&artifacts[0], &model)?;
    let mut result = JobResult {
        config,
        task: kind,
        budget: effective_budget(&sched, &model),
        total_epochs: sched.total_epochs,
        step_epochs: sched.steps.iter().map(|s| s.epochs).collect(),
        optimizer_steps: run.steps.iter().map(|s| s.optimizer_steps).collect(),
        a_resp: None,
        unparseable_rate: None,
        max_lp: None,
        argmax_layer: None,
        gap: None,
        anls: None,
        artifacts: Vec::new(),
    };
    let responder = ParallelResponder {
        model: &model,
        workers: cfg.workers,
    };
    if kind.is_binary() {
        if cfg.finetune.probe_after {
            let (ptrain, ptest, _) = probe_sets(cfg, kind)?;
            let o = probe_model(&model, &ptrain, &ptest, cfg)?;
            artifacts.extend(write_probe_outputs(&dir, &o)?);
            result.max_lp = Some(o.gap.max_lp);
            result.argmax_layer = Some(o.gap.argmax_layer);
            result.gap = Some(o.gap.gap);
            result.a_resp = Some(o.responses.a_resp);
            result.unparseable_rate = Some(o.responses.unparseable_rate);
        } else {
            let r = response_accuracy(&responder, &test)?;
            let p = dir.join("responses.csv");
            atomic_write(&p, &io::responses_csv(&r.records)?)?;
            artifacts.push(p);
            result.a_resp = Some(r.a_resp);
            result.unparseable_rate = Some(r.unparseable_rate);
        }
    } else {
        let e = anls_eval(&responder, &test, cfg.anls_tau)?;
        let p = dir.join("answers.csv");
        let rows: Vec<Vec<String>> = e
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| vec![i.to_string(), r.question.clone(), r.generated.clone(), r.gold.clone()])
            .collect();
        atomic_write(&p, &io::table_csv(&["index", "question", "generated", "gold"], &rows)?)?;
        artifacts.push(p);
        result.anls = Some(e.anls);
    }
    result.artifacts = artifacts.iter().map(|p| paths.rel(p)).collect();
    write_json(&dir.join("result.json"), &result)?;
    let timing = JobTiming {
        config,
        task: kind,
        step_seconds: run.steps.iter().map(|s| s.seconds).collect(),
    };
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(result)
}

/// Rebuilds the run report from the artifacts on disk.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<RunReport> {
    let paths = Paths::new(&cfg.out_dir);
    let mut baselines = Vec::new();
    for kind in cfg.binary_tasks() {
        let dir = paths.probe_dir(kind);
        let gap_path = dir.join("gap.json");
        if !gap_path.exists() {
            continue;
        }
        let g: GapReport = read_json(&gap_path)?;
        baselines.push(TaskBaseline {
            task: kind,
            a_resp: g.a_resp,
            max_lp: g.max_lp,
            argmax_layer: g.argmax_layer,
            gap: g.gap,
            curve: paths.rel(&dir.join("curve.csv")),
        });
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &config in &cfg.finetune.configs {
        for &kind in &cfg.finetune.tasks {
            let dir = paths.job_dir(config, kind);
            if !dir.join("result.json").exists() {
                continue;
            }
            rows.push(read_json::<JobResult>(&dir.join("result.json"))?);
            if let Ok(t) = read_json::<JobTiming>(&dir.join("timing.json")) {
                timings.push(t);
            }
        }
    }
    let base_reached_band = read_json::<BaseTrainLog>(&paths.root.join("base/train_log.json"))
        .ok()
        .map(|l| l.reached_band);
    let plan = read_json::<LayerGroupPlan>(&paths.plan()).ok();
    let report = RunReport {
        seed: cfg.seed,
        base_reached_band,
        plan,
        baselines,
        rows,
    };
    let dir = paths.report_dir();
    write_json(&dir.join("report.json"), &report)?;
    atomic_write(&dir.join("summary.csv"), &report.summary_csv()?)?;
    atomic_write(&dir.join("timing.csv"), &timing_csv(&timings)?)?;
    atomic_write(&dir.join("tables.txt"), report.render(&[]).as_bytes())?;
    Ok(report)
}

/// Wall-clock table for display; read from the timing artifacts.
pub fn load_timings(cfg: &ExperimentConfig) -> Vec<JobTiming> {
    let paths = Paths::new(&cfg.out_dir);
    let mut out = Vec::new();
    for &config in &cfg.finetune.configs {
        for &kind in &cfg.finetune.tasks {
            if let Ok(t) = read_json::<JobTiming>(&paths.job_dir(config, kind).join("timing.json")) {
                out.push(t);
            }
        }
    }
    out
}

/// All stages in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<RunReport> {
    cmd_generate(cfg)?;
    cmd_train_base(cfg)?;
    cmd_probe(cfg)?;
    cmd_finetune(cfg)
}

/// Relative paths and contents of every CSV/JSON file under `root`, except
/// wall-clock files, in sorted order.
pub fn report_tree(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files).map_err(|e| Error::at(root, e))?;
    files.retain(|p| {
        matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) && !is_timing_artifact(p)
    });
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
            let bytes = fs::read(&p).map_err(|e| Error::at(&p, e))?;
            Ok((rel, bytes))
        })
        .collect()
}
