//! Run reports assembled from the per-job artifacts on disk.

use std::fmt::Write as _;
use std::path::Path;

use plab_core::finetune::{LayerGroupPlan, TuneConfig};
use plab_core::taskgen::TaskKind;
use serde::{Deserialize, Serialize};

use crate::io::{fmt_num, table_csv};
use crate::Result;

/// Deterministic outcome of one (configuration, task) fine-tuning job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub config: TuneConfig,
    pub task: TaskKind,
    pub budget: f64,
    pub total_epochs: usize,
    pub step_epochs: Vec<usize>,
    pub optimizer_steps: Vec<u64>,
    pub a_resp: Option<f64>,
    pub unparseable_rate: Option<f64>,
    pub max_lp: Option<f64>,
    pub argmax_layer: Option<usize>,
    pub gap: Option<f64>,
    pub anls: Option<f64>,
    /// Artifact files of this job, relative to the run directory.
    pub artifacts: Vec<String>,
}

/// Wall-clock of one job; kept apart from the deterministic artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub config: TuneConfig,
    pub task: TaskKind,
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBaseline {
    pub task: TaskKind,
    pub a_resp: f64,
    pub max_lp: f64,
    pub argmax_layer: usize,
    pub gap: f64,
    pub curve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub base_reached_band: Option<bool>,
    pub plan: Option<LayerGroupPlan>,
    pub baselines: Vec<TaskBaseline>,
    pub rows: Vec<JobResult>,
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "config",
    "task",
    "budget",
    "total_epochs",
    "optimizer_steps",
    "a_resp",
    "max_lp",
    "argmax_layer",
    "gap",
    "anls",
    "unparseable_rate",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl RunReport {
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.config.ascii().to_string(),
                    r.task.to_string(),
                    fmt_num(r.budget),
                    r.total_epochs.to_string(),
                    r.optimizer_steps.iter().sum::<u64>().to_string(),
                    opt(r.a_resp),
                    opt(r.max_lp),
                    r.argmax_layer.map(|l| l.to_string()).unwrap_or_default(),
                    opt(r.gap),
                    opt(r.anls),
                    opt(r.unparseable_rate),
                ]
            })
            .collect();
        table_csv(&SUMMARY_HEADER, &rows)
    }

    pub fn find(&self, config: TuneConfig, task: TaskKind) -> Option<&JobResult> {
        self.rows.iter().find(|r| r.config == config && r.task == task)
    }

    /// Plain-text tables shaped like the paper's: one block per task with
    /// response accuracy, probing accuracy and gap per configuration, in
    /// percent, then ANLS for open-ended tasks.
    pub fn render(&self, timings: &[JobTiming]) -> String {
        let mut s = String::new();
        let mut configs: Vec<TuneConfig> = Vec::new();
        for r in &self.rows {
            if !configs.contains(&r.config) {
                configs.push(r.config);
            }
        }
        let pct = |v: Option<f64>| v.map(|x| format!("{:>8.2}", 100.0 * x)).unwrap_or_else(|| format!("{:>8}", "-"));
        let _ = write!(s, "{:<22}", "");
        for c in &configs {
            let _ = write!(s, "{:>8}", c.ascii());
        }
        s.push('\n');
        let _ = write!(s, "{:<22}", "budget");
        for c in &configs {
            let b = self.rows.iter().find(|r| r.config == *c).map(|r| r.budget);
            let _ = write!(s, "{:>8}", b.map(|b| format!("({b:.0})")).unwrap_or_default());
        }
        s.push('\n');
        let mut tasks: Vec<TaskKind> = self.rows.iter().map(|r| r.task).collect();
        tasks.sort();
        tasks.dedup();
        for t in tasks {
            let _ = writeln!(s, "[{t}]");
            let lines: [(&str, fn(&JobResult) -> Option<f64>); 4] = [
                ("response accuracy", |r| r.a_resp),
                ("probing accuracy", |r| r.max_lp),
                ("gap", |r| r.gap),
                ("anls", |r| r.anls),
            ];
            for (name, get) in lines {
                let vals: Vec<Option<f64>> = configs
                    .iter()
                    .map(|c| self.find(*c, t).and_then(get))
                    .collect();
                if vals.iter().all(Option::is_none) {
                    continue;
                }
                let _ = write!(s, "  {name:<20}");
                for v in vals {
                    let _ = write!(s, "{}", pct(v));
                }
                s.push('\n');
            }
            let secs: Vec<Option<f64>> = configs
                .iter()
                .map(|c| {
                    timings
                        .iter()
                        .find(|x| x.config == *c && x.task == t)
                        .map(|x| x.step_seconds.iter().sum())
                })
                .collect();
            if secs.iter().any(Option::is_some) {
                let _ = write!(s, "  {:<20}", "training time (s)");
                for v in secs {
                    let _ = write!(s, "{}", v.map(|x| format!("{x:>8.1}")).unwrap_or_else(|| format!("{:>8}", "-")));
                }
                s.push('\n');
            }
        }
        s
    }
}

pub fn timing_csv(timings: &[JobTiming]) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = timings
        .iter()
        .map(|t| {
            vec![
                t.config.ascii().to_string(),
                t.task.to_string(),
                t.step_seconds.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(";"),
                format!("{:.3}", t.step_seconds.iter().sum::<f64>()),
            ]
        })
        .collect();
    table_csv(&["config", "task", "step_seconds", "total_seconds"], &rows)
}

/// Files of a run directory that carry wall-clock measurements and so are
/// expected to differ between otherwise identical runs.
pub fn is_timing_artifact(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("timing"))
}
