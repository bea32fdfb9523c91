//! Answer-span language-model training shared by base training and
//! fine-tuning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::init;
use crate::model::{tokenizer, FreezeMask, Model, Sequence};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::response::{format_prompt, response_accuracy, Responder};
use crate::tape::Tape;
use crate::taskgen::{Dataset, TaskKind, TaskSample};
use crate::Real;

/// A prompt followed by its answer, with next-token targets on the answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Prompt tokens then answer tokens; EOS is only ever a target.
    pub text: Vec<usize>,
    pub prompt_len: usize,
    /// Answer tokens followed by EOS.
    pub targets: Vec<usize>,
}

impl Example {
    pub fn from_sample(s: &TaskSample) -> Result<Self> {
        let prompt = if s.kind.is_binary() {
            format_prompt(&s.question)?
        } else {
            s.question.clone()
        };
        let mut text = tokenizer::encode(&prompt)?;
        let prompt_len = text.len();
        let answer = tokenizer::encode(&s.target_text())?;
        text.extend_from_slice(&answer);
        let mut targets = answer;
        targets.push(tokenizer::EOS);
        Ok(Self {
            text,
            prompt_len,
            targets,
        })
    }
}

/// Mean next-token cross-entropy over the answer spans of a batch.
pub fn answer_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &[(&Example, &crate::image::Image)],
    track_grads: bool,
) -> Result<(crate::tape::Var, Vec<crate::tape::Var>)> {
    let seqs: Vec<Sequence<'_>> = batch
        .iter()
        .map(|(e, img)| Sequence {
            text: &e.text,
            image: img,
        })
        .collect();
    let graph = model.trunk(tape, &seqs, track_grads)?;
    let offset = 1 + model.config().n_image_tokens();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ((e, _), seg) in batch.iter().zip(&graph.segments) {
        for (j, &t) in e.targets.iter().enumerate() {
            rows.push(seg.start + offset + e.prompt_len - 1 + j);
            targets.push(Some(t));
        }
    }
    let logits = model.head(tape, &graph, &rows)?;
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok((loss, graph.params))
}

/// Adam over the currently trainable parameters of a model.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    trainable: Vec<bool>,
    adam: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &Model<T>, adam: AdamConfig) -> Self {
        let trainable: Vec<bool> = (0..model.params().len()).map(|i| model.is_trainable(i)).collect();
        let lens: Vec<usize> = model
            .params()
            .iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.tensor.len())
            .collect();
        Self {
            trainable,
            adam: Adam::new(adam, &lens),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// One optimizer step; returns the batch loss. Frozen parameters are
    /// never handed to the optimizer.
    pub fn step(&mut self, model: &mut Model<T>, batch: &[(&Example, &crate::image::Image)], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, vars) = answer_loss(model, &mut tape, batch, true)?;
        let lv = tape.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {lv} after {} steps",
                self.adam.steps_taken()
            )));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Option<Vec<T>>> = vars
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(&v, _)| grads.take(v))
            .collect();
        let mut params: Vec<&mut crate::Tensor<T>> = model
            .params_mut()
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| &mut p.tensor)
            .collect();
        self.adam.step(&mut params, &mut g, lr)?;
        Ok(lv)
    }
}

/// Examples and images of a dataset, in sample order.
pub fn examples(ds: &Dataset) -> Result<Vec<Example>> {
    ds.samples.iter().map(Example::from_sample).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps between validation checks; 0 checks once per epoch.
    pub eval_every: usize,
    pub band_low: f64,
    pub band_high: f64,
    /// Drop a task's samples from the pool while its validation accuracy is
    /// at or above `band_low`, so early learners stop at band entry.
    pub park_in_band: bool,
    pub adam: AdamConfig,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            eval_every: 0,
            band_low: 0.60,
            band_high: 0.85,
            park_in_band: true,
            adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValCheck {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss since the previous check.
    pub train_loss: f64,
    pub accuracy: Vec<(TaskKind, f64)>,
    pub in_band: bool,
    /// Tasks left out of training after this check.
    #[serde(default)]
    pub parked: Vec<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainLog {
    pub checks: Vec<ValCheck>,
    /// Index into `checks` of the kept parameters.
    pub kept: usize,
    pub reached_band: bool,
    pub steps: u64,
}

fn band_distance(acc: &[(TaskKind, f64)], lo: f64, hi: f64) -> f64 {
    acc.iter()
        .map(|&(_, a)| if a < lo { lo - a } else if a > hi { a - hi } else { 0.0 })
        .sum()
}

/// Joint answer-span training on every task until each binary validation
/// set's response accuracy lies inside the band. With `park_in_band` a task
/// sits out while it is at or above the lower edge. When the band is never
/// reached the parameters from the check closest to it are kept.
pub fn train_base<T: Real>(
    model: &mut Model<T>,
    train: &[Dataset],
    val: &[Dataset],
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<BaseTrainLog> {
    if train.is_empty() || val.iter().any(|v| !v.kind.is_binary()) || val.is_empty() {
        return Err(config("base training needs training sets and binary validation sets"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(config("batch size and epoch cap must be positive"));
    }
    model.set_mask(FreezeMask::all(model.config().n_layers))?;
    // (example, image, index into `val` of the example's task)
    let mut pool: Vec<(Example, &crate::image::Image, Option<usize>)> = Vec::new();
    for ds in train {
        let slot = val.iter().position(|v| v.kind == ds.kind);
        for s in &ds.samples {
            pool.push((Example::from_sample(s)?, &s.image, slot));
        }
    }
    let per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.max_epochs) as u64;
    let sched = LrSchedule::cosine(cfg.lr, total)?;
    let eval_every = if cfg.eval_every == 0 { per_epoch } else { cfg.eval_every } as u64;
    let mut trainer = Trainer::new(model, cfg.adam);
    let mut rng = init::rng(init::derive_seed(seed, "base-train"));
    let mut parked = vec![false; val.len()];
    let mut checks = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut step = 0u64;
    'outer: while step < total {
        let mut order: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].2.map_or(true, |t| !parked[t]))
            .collect();
        if order.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Example, &crate::image::Image)> = chunk.iter().map(|&i| (&pool[i].0, pool[i].1)).collect();
            loss_sum += trainer.step(model, &batch, sched.lr_at(step)?)?;
            loss_n += 1;
            step += 1;
            if step % eval_every == 0 || step == total {
                let accuracy: Vec<(TaskKind, f64)> = val
                    .iter()
                    .map(|v| Ok((v.kind, response_accuracy(model as &dyn Responder, v)?.a_resp)))
                    .collect::<Result<_>>()?;
                let dist = band_distance(&accuracy, cfg.band_low, cfg.band_high);
                let now: Vec<bool> = accuracy.iter().map(|&(_, a)| cfg.park_in_band && a >= cfg.band_low).collect();
                checks.push(ValCheck {
                    step,
                    epoch: ((step - 1) / per_epoch as u64) as usize,
                    train_loss: loss_sum / loss_n.max(1) as f64,
                    accuracy,
                    in_band: dist == 0.0,
                    parked: val.iter().zip(&now).filter(|(_, &p)| p).map(|(v, _)| v.kind).collect(),
                });
                loss_sum = 0.0;
                loss_n = 0;
                if dist == 0.0 {
                    return Ok(BaseTrainLog {
                        kept: checks.len() - 1,
                        checks,
                        reached_band: true,
                        steps: step,
                    });
                }
                if best.as_ref().map_or(true, |b| dist < b.0) {
                    best = Some((dist, checks.len() - 1, model.clone()));
                }
                if step == total {
                    break 'outer;
                }
                if now != parked {
                    parked = now;
                    continue 'outer;
                }
            }
        }
    }
    let (_, kept, snapshot) = best.ok_or_else(|| contract("no validation check ran"))?;
    *model = snapshot;
    Ok(BaseTrainLog {
        checks,
        kept,
        reached_band: false,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{generate, Split, TaskGenConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            image_px: 8,
            patch_px: 4,
            max_seq: 128,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn example_targets_follow_prompt() {
        let ds = generate(TaskKind::Figure, 2, 0, Split::Train, &TaskGenConfig { image_px: 12 }).unwrap();
        let e = Example::from_sample(&ds.samples[0]).unwrap();
        assert_eq!(e.text.len(), e.prompt_len + 1);
        assert_eq!(e.targets.len(), 2);
        assert_eq!(e.targets[1], tokenizer::EOS);
        assert_eq!(e.targets[0], e.text[e.prompt_len]);
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let ds = generate(TaskKind::Figure, 4, 0, Split::Train, &TaskGenConfig { image_px: 12 }).unwrap();
        let cfg = ModelConfig { image_px: 12, ..tiny() };
        let mut model = Model::<f64>::new(cfg, 1).unwrap();
        model.set_trainable(&[crate::model::ParamGroup::Layer(1)]).unwrap();
        let before = model.clone();
        let ex = examples(&ds).unwrap();
        let batch: Vec<_> = ex.iter().zip(&ds.samples).map(|(e, s)| (e, &s.image)).collect();
        let mut tr = Trainer::new(&model, AdamConfig::default());
        for _ in 0..3 {
            tr.step(&mut model, &batch, 1e-2).unwrap();
        }
        for (a, b) in before.params().iter().zip(model.params()) {
            let trainable = model.mask().is_trainable(a.group);
            assert_eq!(a.tensor == b.tensor, !trainable, "{}", a.name);
        }
    }
}
