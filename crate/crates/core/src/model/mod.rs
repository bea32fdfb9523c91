//! Toy vision-language decoder.
//!
//! Sequence layout is `[BOS] [image tokens] [text tokens]`: the image comes
//! before the query. Image tokens are linear projections of flattened
//! patches; text tokens are character embeddings. The decoder is a stack of
//! pre-norm blocks (causal multi-head attention, GELU MLP with ratio 4) and
//! the output of every block is exposed as that layer's hidden state.

mod config;
pub mod tokenizer;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

pub use config::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::image::Image;
use crate::init::{self, xavier_uniform_with};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use tokenizer::{BOS, EOS, IMG};

const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 16;
const FIRST_LAYER_PARAM: usize = 4;

/// Named unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embeddings,
    Projector,
    Layer(usize),
    /// Final norm plus the output projection.
    LmHead,
}

impl ParamGroup {
    pub fn name(&self) -> String {
        match self {
            ParamGroup::Embeddings => "embeddings".into(),
            ParamGroup::Projector => "projector".into(),
            ParamGroup::Layer(l) => format!("layer.{l}"),
            ParamGroup::LmHead => "lm_head".into(),
        }
    }

    pub fn parse(name: &str, n_layers: usize) -> Result<Self> {
        let g = match name {
            "embeddings" => ParamGroup::Embeddings,
            "projector" => ParamGroup::Projector,
            "lm_head" => ParamGroup::LmHead,
            _ => {
                let l = name
                    .strip_prefix("layer.")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| config(format!("unknown parameter group {name:?}")))?;
                ParamGroup::Layer(l)
            }
        };
        if let ParamGroup::Layer(l) = g {
            if l >= n_layers {
                return Err(config(format!("layer {l} out of range for {n_layers} layers")));
            }
        }
        Ok(g)
    }
}

/// Trainable flag per parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub embeddings: bool,
    pub projector: bool,
    pub layers: Vec<bool>,
    pub lm_head: bool,
}

impl FreezeMask {
    pub fn all(n_layers: usize) -> Self {
        Self {
            embeddings: true,
            projector: true,
            layers: vec![true; n_layers],
            lm_head: true,
        }
    }

    pub fn none(n_layers: usize) -> Self {
        Self {
            embeddings: false,
            projector: false,
            layers: vec![false; n_layers],
            lm_head: false,
        }
    }

    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Embeddings => self.embeddings,
            ParamGroup::Projector => self.projector,
            ParamGroup::Layer(l) => self.layers.get(l).copied().unwrap_or(false),
            ParamGroup::LmHead => self.lm_head,
        }
    }

    fn set(&mut self, g: ParamGroup, on: bool) {
        match g {
            ParamGroup::Embeddings => self.embeddings = on,
            ParamGroup::Projector => self.projector = on,
            ParamGroup::Layer(l) => self.layers[l] = on,
            ParamGroup::LmHead => self.lm_head = on,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Which positions hold image tokens, question tokens and the final token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub image_span: Range<usize>,
    pub text_span: Range<usize>,
    pub last_index: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.last_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Post-block hidden states of one sequence, one `len×d` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateCache<T> {
    pub layers: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub cache: HiddenStateCache<T>,
    pub layout: SequenceLayout,
}

/// One prompt of a batch: text tokens (without BOS/image placeholders) and
/// the image shown before them.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub text: &'a [usize],
    pub image: &'a Image,
}

/// Variables of a batched trunk pass.
#[derive(Debug)]
pub struct TrunkGraph {
    pub params: Vec<Var>,
    /// Post-block output of each layer over all rows of the batch.
    pub hidden: Vec<Var>,
    pub segments: Vec<Range<usize>>,
    pub layouts: Vec<SequenceLayout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    mask: FreezeMask,
}

impl<T: Real> Model<T> {
    /// Weight matrices are Xavier-uniform, biases zero and norm gains one.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = init::rng(seed);
        let mut params = Vec::new();
        let mut push = |name: String, group, t: Tensor<T>| {
            params.push(Param {
                name,
                group,
                tensor: t,
            })
        };
        let mut w = |shape: &[usize]| xavier_uniform_with::<T>(shape, &mut rng);
        push("embeddings.token".into(), ParamGroup::Embeddings, w(&[cfg.vocab_size, d])?);
        push("embeddings.position".into(), ParamGroup::Embeddings, w(&[cfg.max_seq, d])?);
        push("projector.weight".into(), ParamGroup::Projector, w(&[d, cfg.patch_dim()])?);
        push("projector.bias".into(), ParamGroup::Projector, Tensor::zeros(&[d]));
        for l in 0..cfg.n_layers {
            let g = ParamGroup::Layer(l);
            let p = |s: &str| format!("layers.{l}.{s}");
            push(p("ln1.gamma"), g, Tensor::filled(&[d], T::one()));
            push(p("ln1.beta"), g, Tensor::zeros(&[d]));
            for proj in ["q", "k", "v", "o"] {
                push(p(&format!("attn.{proj}.weight")), g, w(&[d, d])?);
                push(p(&format!("attn.{proj}.bias")), g, Tensor::zeros(&[d]));
            }
            push(p("ln2.gamma"), g, Tensor::filled(&[d], T::one()));
            push(p("ln2.beta"), g, Tensor::zeros(&[d]));
            push(p("mlp.fc1.weight"), g, w(&[4 * d, d])?);
            push(p("mlp.fc1.bias"), g, Tensor::zeros(&[4 * d]));
            push(p("mlp.fc2.weight"), g, w(&[d, 4 * d])?);
            push(p("mlp.fc2.bias"), g, Tensor::zeros(&[d]));
        }
        push("final_norm.gamma".into(), ParamGroup::LmHead, Tensor::filled(&[d], T::one()));
        push("final_norm.beta".into(), ParamGroup::LmHead, Tensor::zeros(&[d]));
        push("lm_head.weight".into(), ParamGroup::LmHead, w(&[cfg.vocab_size, d])?);
        Ok(Self {
            cfg,
            params,
            mask: FreezeMask::all(cfg.n_layers),
        })
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint. Every
    /// parameter must be present with the expected shape.
    pub fn from_named(cfg: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if named.len() != model.params.len() {
            return Err(contract(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (p, (name, t)) in model.params.iter_mut().zip(named) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(contract(format!(
                    "parameter {name:?} {:?} does not match expected {:?} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn group_param_count(&self, g: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == g)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: FreezeMask) -> Result<()> {
        if mask.layers.len() != self.cfg.n_layers {
            return Err(config("freeze mask layer count differs from the model"));
        }
        self.mask = mask;
        Ok(())
    }

    /// Fine-tuning freeze policy: exactly `groups` plus `lm_head` are
    /// trainable. The projector stays frozen; naming it is an error.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) -> Result<FreezeMask> {
        let mut mask = FreezeMask::none(self.cfg.n_layers);
        for &g in groups {
            match g {
                ParamGroup::Projector => {
                    return Err(config("the projector is frozen during fine-tuning"))
                }
                ParamGroup::Layer(l) if l >= self.cfg.n_layers => {
                    return Err(config(format!("layer {l} out of range")))
                }
                _ => mask.set(g, true),
            }
        }
        mask.lm_head = true;
        self.mask = mask.clone();
        Ok(mask)
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.mask.is_trainable(self.params[idx].group)
    }

    fn layer_param(&self, vars: &[Var], l: usize, k: usize) -> Var {
        vars[FIRST_LAYER_PARAM + l * PER_LAYER + k]
    }

    /// Patch tokens for one image, `(image_px/patch_px)²` rows of width
    /// `d_model`.
    pub fn encode_image(&self, img: &Image) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let tok = self.project_patches(&mut tape, &vars, &[img])?;
        Ok(tape.value(tok).clone())
    }

    fn register(&self, tape: &mut Tape<T>, track_grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let g = track_grads && self.mask.is_trainable(p.group);
                tape.leaf(p.tensor.clone(), g)
            })
            .collect()
    }

    fn project_patches(&self, tape: &mut Tape<T>, vars: &[Var], imgs: &[&Image]) -> Result<Var> {
        let mut rows = Vec::new();
        for img in imgs {
            if img.size() != self.cfg.image_px {
                return Err(Error::Shape {
                    op: "encode_image",
                    lhs: vec![self.cfg.image_px, self.cfg.image_px, 3],
                    rhs: vec![img.size(), img.size(), 3],
                });
            }
            rows.extend(img.patches(self.cfg.patch_px)?.into_iter().map(|v| T::of(v as f64)));
        }
        let n = imgs.len() * self.cfg.n_image_tokens();
        let patches = tape.constant(Tensor::new(&[n, self.cfg.patch_dim()], rows)?);
        tape.linear(patches, vars[2], Some(vars[3]))
    }

    /// Layout of a prompt with `text_len` text tokens.
    pub fn layout(&self, text_len: usize) -> SequenceLayout {
        let p = self.cfg.n_image_tokens();
        SequenceLayout {
            image_span: 1..1 + p,
            text_span: 1 + p..1 + p + text_len,
            last_index: p + text_len,
        }
    }

    /// Embeds and runs the decoder stack over a batch. Parameters are
    /// recorded as leaves that require gradients when `track_grads` is set
    /// and their group is trainable.
    pub fn trunk(&self, tape: &mut Tape<T>, seqs: &[Sequence<'_>], track_grads: bool) -> Result<TrunkGraph> {
        if seqs.is_empty() {
            return Err(contract("empty batch"));
        }
        let cfg = &self.cfg;
        let vars = self.register(tape, track_grads);
        let p = cfg.n_image_tokens();
        let mut tok_ids = Vec::new();
        let mut patch_ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut layouts = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.text.is_empty() {
                return Err(contract("prompt has no text tokens"));
            }
            let len = 1 + p + s.text.len();
            if len > cfg.max_seq {
                return Err(Error::Length {
                    len,
                    max: cfg.max_seq,
                });
            }
            let start = tok_ids.len();
            tok_ids.push(Some(BOS));
            patch_ids.push(None);
            for i in 0..p {
                tok_ids.push(None);
                patch_ids.push(Some(b * p + i));
            }
            for &t in s.text {
                if t >= cfg.vocab_size || t == IMG {
                    return Err(contract("text token out of range"));
                }
                tok_ids.push(Some(t));
                patch_ids.push(None);
            }
            pos_ids.extend((0..len).map(Some));
            segments.push(start..start + len);
            layouts.push(self.layout(s.text.len()));
        }
        let imgs: Vec<&Image> = seqs.iter().map(|s| s.image).collect();
        let patch_tok = self.project_patches(tape, &vars, &imgs)?;
        let te = tape.embedding(vars[0], &tok_ids)?;
        let ie = tape.embedding(patch_tok, &patch_ids)?;
        let pe = tape.embedding(vars[1], &pos_ids)?;
        let x = tape.add(te, ie)?;
        let mut x = tape.add(x, pe)?;
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let lp = |k| self.layer_param(&vars, l, k);
            let h = tape.layer_norm(x, lp(0), lp(1), LN_EPS)?;
            let q = tape.linear(h, lp(2), Some(lp(3)))?;
            let k = tape.linear(h, lp(4), Some(lp(5)))?;
            let v = tape.linear(h, lp(6), Some(lp(7)))?;
            let a = tape.causal_attention(q, k, v, &segments, cfg.n_heads)?;
            let o = tape.linear(a, lp(8), Some(lp(9)))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, lp(10), lp(11), LN_EPS)?;
            let m = tape.linear(h, lp(12), Some(lp(13)))?;
            let m = tape.gelu(m)?;
            let m = tape.linear(m, lp(14), Some(lp(15)))?;
            x = tape.add(x, m)?;
            hidden.push(x);
        }
        Ok(TrunkGraph {
            params: vars,
            hidden,
            segments,
            layouts,
        })
    }

    /// Vocabulary logits for the given global rows of the last layer.
    pub fn head(&self, tape: &mut Tape<T>, graph: &TrunkGraph, rows: &[usize]) -> Result<Var> {
        let n = self.params.len();
        let last = *graph.hidden.last().ok_or_else(|| contract("no layers"))?;
        let picked: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let x = tape.embedding(last, &picked)?;
        let x = tape.layer_norm(x, graph.params[n - 3], graph.params[n - 2], LN_EPS)?;
        tape.linear(x, graph.params[n - 1], None)
    }

    pub fn forward(&self, text: &[usize], img: &Image) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let graph = self.trunk(&mut tape, &[Sequence { text, image: img }], false)?;
        let rows: Vec<usize> = graph.segments[0].clone().collect();
        let logits = self.head(&mut tape, &graph, &rows)?;
        let cache = HiddenStateCache {
            layers: graph.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        };
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            cache,
            layout: graph.layouts[0].clone(),
        })
    }

    /// Next-token logits at the final position of every prompt in a batch.
    pub fn last_logits(&self, seqs: &[Sequence<'_>]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let graph = self.trunk(&mut tape, seqs, false)?;
        let rows: Vec<usize> = graph.segments.iter().map(|s| s.end - 1).collect();
        let logits = self.head(&mut tape, &graph, &rows)?;
        let v = tape.value(logits);
        Ok((0..rows.len()).map(|r| v.row(r).to_vec()).collect())
    }

    /// Greedy decoding until EOS or `max_new` tokens; returns the text of
    /// the generated tokens.
    pub fn generate(&self, text: &[usize], img: &Image, max_new: usize) -> Result<String> {
        let out = self.generate_batch(&[Sequence { text, image: img }], max_new)?;
        Ok(out.into_iter().next().unwrap_or_default())
    }

    /// Greedy decoding of several prompts at once. Each prompt stops at its
    /// own EOS; results equal decoding each prompt alone. BOS and the image
    /// placeholder are never emitted.
    pub fn generate_batch(&self, seqs: &[Sequence<'_>], max_new: usize) -> Result<Vec<String>> {
        if max_new == 0 {
            return Err(contract("max_new must be at least 1"));
        }
        let mut texts: Vec<Vec<usize>> = seqs.iter().map(|s| s.text.to_vec()).collect();
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); seqs.len()];
        let mut active: Vec<usize> = (0..seqs.len()).collect();
        let limit = self.cfg.max_seq - 1 - self.cfg.n_image_tokens();
        for _ in 0..max_new {
            active.retain(|&i| texts[i].len() < limit);
            if active.is_empty() {
                break;
            }
            let batch: Vec<Sequence<'_>> = active
                .iter()
                .map(|&i| Sequence {
                    text: &texts[i],
                    image: seqs[i].image,
                })
                .collect();
            let logits = self.last_logits(&batch)?;
            let mut still = Vec::new();
            for (&i, row) in active.iter().zip(&logits) {
                let next = greedy_token(row);
                if next != EOS {
                    texts[i].push(next);
                    generated[i].push(next);
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(generated.iter().map(|g| tokenizer::decode(g)).collect())
    }
}

fn greedy_token<T: Real>(row: &[T]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate() {
        if i != BOS && i != IMG && v > row[best] {
            best = i;
        }
    }
    best
}
