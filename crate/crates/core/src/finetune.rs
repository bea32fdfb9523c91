//! Layer-group segmentation, fine-tuning schedules, their execution and the
//! effective trainable budget.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::init;
use crate::model::{Model, ParamGroup};
use crate::optim::{AdamConfig, LrSchedule};
use crate::probing::{LayerAccuracyCurve, TokenType};
use crate::taskgen::Dataset;
use crate::train::{Example, Trainer};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Lower,
    Middle,
    Upper,
}

/// Contiguous Lower/Middle/Upper partition of the layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroupPlan {
    pub lower: Range<usize>,
    pub middle: Range<usize>,
    pub upper: Range<usize>,
}

impl LayerGroupPlan {
    /// Middle starts at `l1`, upper at `l2`.
    pub fn from_boundaries(l1: usize, l2: usize, n_layers: usize) -> Result<Self> {
        if !(0 < l1 && l1 < l2 && l2 < n_layers) {
            return Err(Error::Segmentation(format!(
                "boundaries {l1},{l2} do not split {n_layers} layers into three non-empty groups"
            )));
        }
        Ok(Self {
            lower: 0..l1,
            middle: l1..l2,
            upper: l2..n_layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.upper.end
    }

    pub fn group(&self, g: Group) -> Range<usize> {
        match g {
            Group::Lower => self.lower.clone(),
            Group::Middle => self.middle.clone(),
            Group::Upper => self.upper.clone(),
        }
    }
}

/// Splits layers where the last-token probing accuracy rises most.
pub fn segment_layers(curve: &LayerAccuracyCurve) -> Result<LayerGroupPlan> {
    segment_series(&curve.series(TokenType::Last))
}

/// The two largest first differences `a[l] − a[l−1]` pick the first layers
/// of the middle and upper groups; ties go to the earlier layer.
pub fn segment_series(acc: &[f64]) -> Result<LayerGroupPlan> {
    let n = acc.len();
    if n < 3 {
        return Err(Error::Segmentation(format!("need at least 3 layers, got {n}")));
    }
    let mut rises: Vec<(usize, f64)> = (1..n).map(|l| (l, acc[l] - acc[l - 1])).collect();
    if rises.iter().any(|r| !r.1.is_finite()) {
        return Err(Error::Segmentation("accuracy series is not finite".into()));
    }
    // stable sort keeps earlier layers first among equal rises
    rises.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    let (a, b) = (rises[0].0, rises[1].0);
    LayerGroupPlan::from_boundaries(a.min(b), a.max(b), n)
}

/// Named fine-tuning configurations. `Base` is the untuned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TuneConfig {
    Base,
    All,
    Lower,
    Middle,
    Upper,
    LowerMiddle,
    MiddleUpper,
    LowerThenMiddle,
    MiddleThenLower,
    MiddleThenUpper,
    UpperThenMiddle,
}

impl TuneConfig {
    /// The paper's ten configurations.
    pub const TUNED: [TuneConfig; 10] = [
        TuneConfig::All,
        TuneConfig::Lower,
        TuneConfig::Middle,
        TuneConfig::Upper,
        TuneConfig::LowerMiddle,
        TuneConfig::MiddleUpper,
        TuneConfig::LowerThenMiddle,
        TuneConfig::MiddleThenLower,
        TuneConfig::MiddleThenUpper,
        TuneConfig::UpperThenMiddle,
    ];

    pub fn ascii(&self) -> &'static str {
        match self {
            TuneConfig::Base => "Base",
            TuneConfig::All => "All",
            TuneConfig::Lower => "Lower",
            TuneConfig::Middle => "Middle",
            TuneConfig::Upper => "Upper",
            TuneConfig::LowerMiddle => "L-M",
            TuneConfig::MiddleUpper => "M-U",
            TuneConfig::LowerThenMiddle => "L>M",
            TuneConfig::MiddleThenLower => "M>L",
            TuneConfig::MiddleThenUpper => "M>U",
            TuneConfig::UpperThenMiddle => "U>M",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TuneConfig::LowerMiddle => "L–M",
            TuneConfig::MiddleUpper => "M–U",
            TuneConfig::LowerThenMiddle => "L→M",
            TuneConfig::MiddleThenLower => "M→L",
            TuneConfig::MiddleThenUpper => "M→U",
            TuneConfig::UpperThenMiddle => "U→M",
            other => other.ascii(),
        }
    }

    /// Safe for file names.
    pub fn slug(&self) -> &'static str {
        match self {
            TuneConfig::Base => "base",
            TuneConfig::All => "all",
            TuneConfig::Lower => "lower",
            TuneConfig::Middle => "middle",
            TuneConfig::Upper => "upper",
            TuneConfig::LowerMiddle => "l-m",
            TuneConfig::MiddleUpper => "m-u",
            TuneConfig::LowerThenMiddle => "l-then-m",
            TuneConfig::MiddleThenLower => "m-then-l",
            TuneConfig::MiddleThenUpper => "m-then-u",
            TuneConfig::UpperThenMiddle => "u-then-m",
        }
    }

    /// Groups trained at each step, in order; `All` is marked by `None`.
    fn steps(&self) -> Option<Vec<Vec<Group>>> {
        use Group::*;
        Some(match self {
            TuneConfig::Base => Vec::new(),
            TuneConfig::All => return None,
            TuneConfig::Lower => alloc::vec![alloc::vec![Lower]],
            TuneConfig::Middle => alloc::vec![alloc::vec![Middle]],
            TuneConfig::Upper => alloc::vec![alloc::vec![Upper]],
            TuneConfig::LowerMiddle => alloc::vec![alloc::vec![Lower, Middle]],
            TuneConfig::MiddleUpper => alloc::vec![alloc::vec![Middle, Upper]],
            TuneConfig::LowerThenMiddle => alloc::vec![alloc::vec![Lower], alloc::vec![Middle]],
            TuneConfig::MiddleThenLower => alloc::vec![alloc::vec![Middle], alloc::vec![Lower]],
            TuneConfig::MiddleThenUpper => alloc::vec![alloc::vec![Middle], alloc::vec![Upper]],
            TuneConfig::UpperThenMiddle => alloc::vec![alloc::vec![Upper], alloc::vec![Middle]],
        })
    }
}

impl fmt::Display for TuneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TuneConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .replace('–', "-")
            .replace('→', ">")
            .replace("->", ">")
            .replace("--", "-");
        [TuneConfig::Base]
            .into_iter()
            .chain(TuneConfig::TUNED)
            .find(|c| c.ascii().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| config(format!("unknown fine-tuning configuration {s:?}")))
    }
}

impl TryFrom<String> for TuneConfig {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TuneConfig> for String {
    fn from(c: TuneConfig) -> String {
        c.ascii().into()
    }
}

/// Parses a comma-separated configuration list.
pub fn parse_configs(list: &str) -> Result<Vec<TuneConfig>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneStep {
    /// Transformer layers trained in this step; lm_head is always trained.
    pub layers: Vec<usize>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneSchedule {
    pub name: TuneConfig,
    pub steps: Vec<TuneStep>,
    pub total_epochs: usize,
}

/// Builds the steps of a configuration. Single-step configurations train
/// their union for every epoch; two-step ones split the epochs in half.
pub fn plan_schedule(name: TuneConfig, plan: &LayerGroupPlan, total_epochs: usize) -> Result<TuneSchedule> {
    let steps = match name.steps() {
        None => alloc::vec![TuneStep {
            layers: (0..plan.n_layers()).collect(),
            epochs: total_epochs,
        }],
        Some(groups) if groups.is_empty() => {
            return Ok(TuneSchedule {
                name,
                steps: Vec::new(),
                total_epochs: 0,
            })
        }
        Some(groups) if groups.len() == 1 => alloc::vec![TuneStep {
            layers: groups[0].iter().flat_map(|&g| plan.group(g)).collect(),
            epochs: total_epochs,
        }],
        Some(groups) => {
            if total_epochs % 2 != 0 {
                return Err(config(format!(
                    "two-step configuration {name} needs an even epoch total, got {total_epochs}"
                )));
            }
            groups
                .iter()
                .map(|gs| TuneStep {
                    layers: gs.iter().flat_map(|&g| plan.group(g)).collect(),
                    epochs: total_epochs / 2,
                })
                .collect()
        }
    };
    Ok(TuneSchedule {
        name,
        steps,
        total_epochs,
    })
}

/// Parameter-epochs of a schedule relative to training every layer and
/// lm_head for the whole run, scaled to 100. Embeddings and the projector
/// are outside the tunable scope.
pub fn effective_budget<T: Real>(sched: &TuneSchedule, model: &Model<T>) -> f64 {
    if sched.total_epochs == 0 {
        return 0.0;
    }
    let n = model.config().n_layers;
    let lm = model.group_param_count(ParamGroup::LmHead) as f64;
    let layer = |l: usize| model.group_param_count(ParamGroup::Layer(l)) as f64;
    let scope = (0..n).map(layer).sum::<f64>() + lm;
    let used: f64 = sched
        .steps
        .iter()
        .map(|s| (s.layers.iter().map(|&l| layer(l)).sum::<f64>() + lm) * s.epochs as f64)
        .sum();
    100.0 * used / (scope * sched.total_epochs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TuneHyper {
    fn default() -> Self {
        Self::classification()
    }
}

impl TuneHyper {
    pub fn classification() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 256,
            epochs: 10,
            adam: AdamConfig::default(),
        }
    }

    pub fn doc_qa() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            epochs: 2,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub layers: Vec<usize>,
    pub epochs: usize,
    pub optimizer_steps: u64,
    pub seconds: f64,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub config: TuneConfig,
    pub steps: Vec<StepReport>,
}

impl FinetuneRun {
    pub fn seconds(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.steps.iter().map(|s| s.optimizer_steps).sum()
    }
}

/// Runs a schedule in place. Each step trains its layers plus lm_head with
/// a fresh optimizer and its own cosine cycle. `clock` returns seconds.
pub fn run_finetune<T: Real>(
    model: &mut Model<T>,
    ds: &Dataset,
    sched: &TuneSchedule,
    hyper: &TuneHyper,
    seed: u64,
    clock: &mut dyn FnMut() -> f64,
) -> Result<FinetuneRun> {
    if hyper.batch_size == 0 {
        return Err(config("batch size must be positive"));
    }
    let n_layers = model.config().n_layers;
    if sched.steps.iter().flat_map(|s| &s.layers).any(|&l| l >= n_layers) {
        return Err(config("schedule names layers the model does not have"));
    }
    let examples: Vec<Example> = ds.samples.iter().map(Example::from_sample).collect::<Result<_>>()?;
    let mut rng = init::rng(init::derive_seed(seed, &format!("finetune/{}", sched.name.slug())));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut reports = Vec::with_capacity(sched.steps.len());
    let saved_mask = model.mask().clone();
    for step in &sched.steps {
        let groups: Vec<ParamGroup> = step.layers.iter().map(|&l| ParamGroup::Layer(l)).collect();
        model.set_trainable(&groups)?;
        let start = clock();
        let per_epoch = examples.len().div_ceil(hyper.batch_size);
        let total = (per_epoch * step.epochs) as u64;
        let mut trainer = Trainer::new(model, hyper.adam);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        if total > 0 {
            let lrs = LrSchedule::cosine(hyper.lr, total)?;
            let mut t = 0u64;
            for _ in 0..step.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(hyper.batch_size) {
                    let batch: Vec<_> = chunk.iter().map(|&i| (&examples[i], &ds.samples[i].image)).collect();
                    loss_sum += trainer.step(model, &batch, lrs.lr_at(t)?)?;
                    n += 1;
                    t += 1;
                }
            }
        }
        reports.push(StepReport {
            layers: step.layers.clone(),
            epochs: step.epochs,
            optimizer_steps: trainer.steps_taken(),
            seconds: clock() - start,
            mean_loss: (n > 0).then(|| loss_sum / n as f64),
        });
    }
    model.set_mask(saved_mask)?;
    Ok(FinetuneRun {
        config: sched.name,
        steps: reports,
    })
}
