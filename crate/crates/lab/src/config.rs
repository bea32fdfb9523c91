//! Experiment configuration: one JSON document, overridable from flags.

use std::path::{Path, PathBuf};

use plab_core::finetune::{TuneConfig, TuneHyper};
use plab_core::model::ModelConfig;
use plab_core::probing::ProbeConfig;
use plab_core::taskgen::{TaskGenConfig, TaskKind};
use plab_core::tensor::Precision;
use plab_core::train::BaseTrainConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    pub configs: Vec<TuneConfig>,
    /// Tasks fine-tuned and evaluated separately, each from the base model.
    pub tasks: Vec<TaskKind>,
    pub classification: TuneHyper,
    pub doc_qa: TuneHyper,
    /// Manual segmentation: first layer of the middle and upper groups.
    pub boundaries: Option<(usize, usize)>,
    /// Re-probe every tuned classification model.
    pub probe_after: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let mut configs = vec![TuneConfig::Base];
        configs.extend(TuneConfig::TUNED);
        Self {
            configs,
            tasks: TaskKind::ALL.to_vec(),
            classification: TuneHyper::classification(),
            doc_qa: TuneHyper::doc_qa(),
            boundaries: None,
            probe_after: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub precision: Precision,
    pub tasks: Vec<TaskSpec>,
    /// Validation samples per binary task for base-training band checks.
    pub n_val: usize,
    pub base_train: BaseTrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneSettings,
    pub anls_tau: f64,
    /// Checkpoint whose mistakes select hard probe/eval samples. Unset runs
    /// unfiltered.
    pub filter_reference: Option<PathBuf>,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            precision: Precision::F64,
            tasks: TaskKind::ALL
                .iter()
                .map(|&kind| TaskSpec {
                    kind,
                    n_train: 8000,
                    n_test: 1000,
                })
                .collect(),
            n_val: 200,
            base_train: BaseTrainConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneSettings::default(),
            anls_tau: 0.5,
            filter_reference: None,
            workers: 1,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Reduced scale: base training and probing fit in about half an hour
    /// on one CPU core.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d_model: 32,
            n_layers: 6,
            n_heads: 4,
            patch_px: 4,
            image_px: 16,
            max_seq: 144,
            ..ModelConfig::default()
        };
        Self {
            model,
            tasks: TaskKind::ALL
                .iter()
                .map(|&kind| TaskSpec {
                    kind,
                    n_train: if kind.is_binary() { 2000 } else { 500 },
                    n_test: if kind.is_binary() { 1000 } else { 200 },
                })
                .collect(),
            precision: Precision::F32,
            base_train: BaseTrainConfig {
                lr: 2e-3,
                batch_size: 16,
                max_epochs: 10,
                eval_every: 250,
                ..BaseTrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn taskgen(&self) -> TaskGenConfig {
        TaskGenConfig {
            image_px: self.model.image_px,
        }
    }

    pub fn task(&self, kind: TaskKind) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.kind == kind)
    }

    pub fn binary_tasks(&self) -> Vec<TaskKind> {
        self.tasks.iter().map(|t| t.kind).filter(|k| k.is_binary()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.n_train < 2 || t.n_test < 2 {
                return Err(Error::Config(format!(
                    "task {} needs at least 2 train and 2 test samples (got {}/{})",
                    t.kind, t.n_train, t.n_test
                )));
            }
            if self.tasks[..i].iter().any(|o| o.kind == t.kind) {
                return Err(Error::Config(format!("task {} listed twice", t.kind)));
            }
        }
        if self.n_val < 2 {
            return Err(Error::Config("n_val must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anls_tau) {
            return Err(Error::Config("anls_tau must lie in [0, 1]".into()));
        }
        for k in &self.finetune.tasks {
            if self.task(*k).is_none() {
                return Err(Error::Config(format!("fine-tune task {k} has no dataset")));
            }
        }
        if let Some((l1, l2)) = self.finetune.boundaries {
            plab_core::finetune::LayerGroupPlan::from_boundaries(l1, l2, self.model.n_layers)?;
        }
        Ok(())
    }
}
