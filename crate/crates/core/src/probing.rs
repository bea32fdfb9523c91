//! Linear probes on frozen hidden states.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::init::{self, derive_seed, xavier_uniform_with};
use crate::kernels::argmax;
use crate::model::{tokenizer, HiddenStateCache, Model, Sequence, SequenceLayout};
use crate::optim::{Adam, AdamConfig, LrSchedule, ScheduleKind};
use crate::response::format_prompt;
use crate::tape::Tape;
use crate::taskgen::{Dataset, TaskKind};
use crate::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenType {
    Image,
    Text,
    All,
    Last,
}

impl TokenType {
    pub const ALL: [TokenType; 4] = [TokenType::Image, TokenType::Text, TokenType::All, TokenType::Last];

    pub fn tag(&self) -> &'static str {
        match self {
            TokenType::Image => "image",
            TokenType::Text => "text",
            TokenType::All => "all",
            TokenType::Last => "last",
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TokenType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_suffix("_token").unwrap_or(s);
        TokenType::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| config(format!("unknown token type {s:?}")))
    }
}

/// Positions that `all` pools over: image and text tokens, BOS excluded.
pub const ALL_TOKEN_SCOPE: &str = "image_span+text_span";

/// Pools rows of one sequence's `len×d` hidden-state matrix.
pub fn pool_rows<T: Real>(hidden: &[T], d: usize, layout: &SequenceLayout, ttype: TokenType) -> Result<Vec<T>> {
    let rows = hidden.len() / d.max(1);
    if d == 0 || hidden.len() % d != 0 || rows <= layout.last_index {
        return Err(contract("hidden-state matrix does not cover the layout"));
    }
    let mean_over = |spans: &[core::ops::Range<usize>]| -> Result<Vec<T>> {
        let count: usize = spans.iter().map(|s| s.len()).sum();
        if count == 0 {
            return Err(contract(format!("{ttype} span is empty")));
        }
        let mut acc = vec![T::zero(); d];
        for s in spans {
            for r in s.clone() {
                for (a, &h) in acc.iter_mut().zip(&hidden[r * d..(r + 1) * d]) {
                    *a = *a + h;
                }
            }
        }
        let inv = T::one() / T::of(count as f64);
        Ok(acc.into_iter().map(|a| a * inv).collect())
    };
    match ttype {
        TokenType::Image => mean_over(&[layout.image_span.clone()]),
        TokenType::Text => mean_over(&[layout.text_span.clone()]),
        TokenType::All => mean_over(&[layout.image_span.clone(), layout.text_span.clone()]),
        TokenType::Last => {
            let r = layout.last_index;
            Ok(hidden[r * d..(r + 1) * d].to_vec())
        }
    }
}

/// Mean of the hidden states of one token type at one layer, or the single
/// last-token state.
pub fn pool_hidden<T: Real>(
    cache: &HiddenStateCache<T>,
    layout: &SequenceLayout,
    layer: usize,
    ttype: TokenType,
) -> Result<Vec<T>> {
    let h = cache
        .layers
        .get(layer)
        .ok_or_else(|| contract(format!("layer {layer} out of range")))?;
    pool_rows(h.data(), h.cols(), layout, ttype)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs are raised until the run takes at least this many optimizer
    /// steps. Zero keeps `epochs` as given.
    pub min_steps: usize,
    pub schedule: ScheduleKind,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            epochs: 1,
            min_steps: 4000,
            schedule: ScheduleKind::Cosine,
            adam: AdamConfig::default(),
        }
    }
}

impl ProbeConfig {
    /// Epoch count actually run for `n` training samples.
    pub fn effective_epochs(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size.max(1)).max(1);
        self.epochs.max(self.min_steps.div_ceil(per_epoch))
    }
}

/// Two-way linear classifier `z = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier<T> {
    /// `2×d`.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> ProbeClassifier<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Tensor::zeros(&[2, d]),
            b: Tensor::zeros(&[2]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, h: &[T]) -> [T; 2] {
        let b = self.b.data();
        [
            crate::kernels::dot(self.w.row(0), h) + b[0],
            crate::kernels::dot(self.w.row(1), h) + b[1],
        ]
    }

    /// Argmax class; a tie goes to class 0.
    pub fn predict(&self, h: &[T]) -> u8 {
        argmax(&self.logits(h)) as u8
    }
}

/// Row-major `n×d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<T> {
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Real> Features<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape {
                    op: "features",
                    lhs: vec![d],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { d, data })
    }

    pub fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Trains a probe with softmax cross-entropy, Adam and a per-step cosine
/// schedule. `W` starts Xavier-uniform and `b` at zero.
pub fn train_probe<T: Real>(
    features: &Features<T>,
    labels: &[u8],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeClassifier<T>> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::Shape {
            op: "train_probe",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if n < 2 {
        return Err(contract("probe training needs at least two samples"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(contract("probe labels must be 0 or 1"));
    }
    if cfg.batch_size == 0 {
        return Err(config("probe batch size must be positive"));
    }
    let d = features.d;
    let mut rng = init::rng(seed);
    let mut clf = ProbeClassifier {
        w: xavier_uniform_with(&[2, d], &mut rng)?,
        b: Tensor::zeros(&[2]),
    };
    let epochs = cfg.effective_epochs(n);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (epochs * per_epoch) as u64;
    let sched = LrSchedule::new(cfg.lr, total, cfg.schedule)?;
    let mut adam = Adam::new(cfg.adam, &[2 * d, 2]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                x.extend_from_slice(features.row(i));
            }
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i] as usize)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[chunk.len(), d], x)?);
            let wv = tape.leaf(clf.w.clone(), true);
            let bv = tape.leaf(clf.b.clone(), true);
            let z = tape.linear(xv, wv, Some(bv))?;
            let loss = tape.softmax_cross_entropy(z, &targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("probe loss became {lv:?} at step {step}")));
            }
            let mut grads = tape.backward(loss)?;
            let mut g = [grads.take(wv), grads.take(bv)];
            let lr = sched.lr_at(step)?;
            adam.step(&mut [&mut clf.w, &mut clf.b], &mut g, lr)?;
            step += 1;
        }
    }
    Ok(clf)
}

/// Fraction of samples whose argmax class equals the label.
pub fn probe_accuracy<T: Real>(clf: &ProbeClassifier<T>, features: &Features<T>, labels: &[u8]) -> Result<f64> {
    if features.is_empty() {
        return Err(contract("probe accuracy over an empty evaluation set"));
    }
    if features.len() != labels.len() || features.d != clf.dim() {
        return Err(Error::Shape {
            op: "probe_accuracy",
            lhs: vec![features.len(), features.d],
            rhs: vec![labels.len(), clf.dim()],
        });
    }
    let hits = (0..features.len())
        .filter(|&i| clf.predict(features.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / features.len() as f64)
}

/// Pooled features for every (layer, token type) of one dataset, taken from
/// a single forward pass per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable<T> {
    pub kind: TaskKind,
    pub n_layers: usize,
    pub labels: Vec<u8>,
    /// Indexed `[layer * 4 + token_type]`.
    pub cells: Vec<Features<T>>,
    pub forward_passes: usize,
}

impl<T: Real> FeatureTable<T> {
    pub fn get(&self, layer: usize, ttype: TokenType) -> &Features<T> {
        &self.cells[layer * TokenType::ALL.len() + ttype.index()]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples per batched forward pass during extraction.
const EXTRACT_BATCH: usize = 32;

/// Runs the backbone once per sample on the binary prompt and pools every
/// layer under every token type.
pub fn extract_features<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<FeatureTable<T>> {
    if !ds.kind.is_binary() {
        return Err(contract("probing needs a binary task"));
    }
    let n_layers = model.config().n_layers;
    let d = model.config().d_model;
    let labels: Vec<u8> = ds
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| contract("binary sample without a label")))
        .collect::<Result<_>>()?;
    let prompts: Vec<Vec<usize>> = ds
        .samples
        .iter()
        .map(|s| tokenizer::encode(&format_prompt(&s.question)?))
        .collect::<Result<_>>()?;
    let mut cells: Vec<Features<T>> = (0..n_layers * TokenType::ALL.len())
        .map(|_| Features {
            d,
            data: Vec::with_capacity(ds.len() * d),
        })
        .collect();
    let mut forward_passes = 0;
    for (samples, texts) in ds.samples.chunks(EXTRACT_BATCH).zip(prompts.chunks(EXTRACT_BATCH)) {
        let seqs: Vec<Sequence<'_>> = samples
            .iter()
            .zip(texts)
            .map(|(s, t)| Sequence {
                text: t,
                image: &s.image,
            })
            .collect();
        let mut tape = Tape::new();
        let graph = model.trunk(&mut tape, &seqs, false)?;
        forward_passes += seqs.len();
        for (l, &h) in graph.hidden.iter().enumerate() {
            let hv = tape.value(h).data();
            for (seg, layout) in graph.segments.iter().zip(&graph.layouts) {
                let rows = &hv[seg.start * d..seg.end * d];
                for tt in TokenType::ALL {
                    let f = pool_rows(rows, d, layout, tt)?;
                    cells[l * TokenType::ALL.len() + tt.index()].data.extend_from_slice(&f);
                }
            }
        }
    }
    Ok(FeatureTable {
        kind: ds.kind,
        n_layers,
        labels,
        cells,
        forward_passes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub layer: usize,
    pub token_type: TokenType,
    pub accuracy: f64,
}

/// Probing accuracy per (layer, token type).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracyCurve {
    pub task: TaskKind,
    pub seed: u64,
    pub n_layers: usize,
    pub n_test: usize,
    pub dataset_id: String,
    pub all_token_scope: String,
    /// Layers ascending, token types in [`TokenType::ALL`] order.
    pub cells: Vec<CurveCell>,
}

impl LayerAccuracyCurve {
    pub fn get(&self, layer: usize, ttype: TokenType) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.token_type == ttype)
            .map(|c| c.accuracy)
    }

    pub fn series(&self, ttype: TokenType) -> Vec<f64> {
        let mut s: Vec<(usize, f64)> = self
            .cells
            .iter()
            .filter(|c| c.token_type == ttype)
            .map(|c| (c.layer, c.accuracy))
            .collect();
        s.sort_by_key(|c| c.0);
        s.into_iter().map(|c| c.1).collect()
    }

    /// Best layer and its accuracy; ties go to the shallowest layer.
    pub fn max(&self, ttype: TokenType) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for c in self.cells.iter().filter(|c| c.token_type == ttype) {
            match best {
                Some((l, a)) if c.accuracy < a || (c.accuracy == a && c.layer > l) => {}
                _ => best = Some((c.layer, c.accuracy)),
            }
        }
        best
    }
}

/// Seed of the probe for one curve cell.
pub fn cell_seed(seed: u64, layer: usize, ttype: TokenType) -> u64 {
    derive_seed(seed, &format!("probe/{layer}/{ttype}"))
}

/// Trains and scores the probe of one curve cell.
pub fn probe_cell<T: Real>(
    train: &FeatureTable<T>,
    test: &FeatureTable<T>,
    layer: usize,
    ttype: TokenType,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<CurveCell> {
    let clf = train_probe(train.get(layer, ttype), &train.labels, cell_seed(seed, layer, ttype), cfg)?;
    let accuracy = probe_accuracy(&clf, test.get(layer, ttype), &test.labels)?;
    Ok(CurveCell {
        layer,
        token_type: ttype,
        accuracy,
    })
}

/// Assembles a curve from already computed cells.
pub fn assemble_curve(
    task: TaskKind,
    seed: u64,
    n_layers: usize,
    n_test: usize,
    dataset_id: String,
    mut cells: Vec<CurveCell>,
) -> Result<LayerAccuracyCurve> {
    cells.sort_by_key(|c| (c.layer, c.token_type));
    if cells.len() != n_layers * TokenType::ALL.len() {
        return Err(contract(format!(
            "curve has {} cells, expected {}",
            cells.len(),
            n_layers * TokenType::ALL.len()
        )));
    }
    if cells.iter().any(|c| !(0.0..=1.0).contains(&c.accuracy)) {
        return Err(contract("probe accuracy outside [0, 1]"));
    }
    Ok(LayerAccuracyCurve {
        task,
        seed,
        n_layers,
        n_test,
        dataset_id,
        all_token_scope: ALL_TOKEN_SCOPE.into(),
        cells,
    })
}

/// All `n_layers × 4` probes over precomputed feature tables.
pub fn sweep_tables<T: Real>(
    train: &FeatureTable<T>,
    test: &FeatureTable<T>,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<LayerAccuracyCurve> {
    if train.kind != test.kind || train.n_layers != test.n_layers {
        return Err(contract("train and test features come from different tasks or models"));
    }
    let mut cells = Vec::with_capacity(train.n_layers * 4);
    for l in 0..train.n_layers {
        for tt in TokenType::ALL {
            cells.push(probe_cell(train, test, l, tt, seed, cfg)?);
        }
    }
    assemble_curve(
        train.kind,
        seed,
        train.n_layers,
        test.len(),
        format!("{}/{}", train.kind, seed),
        cells,
    )
}

/// Extracts features for both splits and sweeps every (layer, token type).
pub fn probe_sweep<T: Real>(
    model: &Model<T>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<LayerAccuracyCurve> {
    if train_ds.kind != test_ds.kind {
        return Err(contract("train and test datasets differ in task kind"));
    }
    let train = extract_features(model, train_ds)?;
    let test = extract_features(model, test_ds)?;
    let mut curve = sweep_tables(&train, &test, seed, cfg)?;
    curve.dataset_id = format!("{}/{}+{}", train_ds.kind, train_ds.seed, test_ds.seed);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::ops::Range;

    fn layout(image: Range<usize>, text: Range<usize>) -> SequenceLayout {
        let last_index = text.end - 1;
        SequenceLayout {
            image_span: image,
            text_span: text,
            last_index,
        }
    }

    #[test]
    fn pooling_means_and_last() {
        // rows: BOS, two image, one text; d = 3
        let h: [f64; 12] = [9.0, 9.0, 9.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0, 2.0];
        let lay = layout(1..3, 3..4);
        assert_eq!(pool_rows(&h, 3, &lay, TokenType::Image).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(pool_rows(&h, 3, &lay, TokenType::Text).unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(pool_rows(&h, 3, &lay, TokenType::Last).unwrap(), vec![2.0, 2.0, 2.0]);
        let all = pool_rows(&h, 3, &lay, TokenType::All).unwrap();
        // 2/3 image mean + 1/3 text mean; BOS excluded
        for (a, e) in all.iter().zip([1.0, 1.0, 2.0 / 3.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        let empty = layout(1..1, 1..2);
        assert!(pool_rows(&h, 3, &empty, TokenType::Image).is_err());
    }

    #[test]
    fn accuracy_counting_and_ties() {
        let f = Features::from_rows(&[vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]]).unwrap();
        let zero = ProbeClassifier::<f64>::zeros(1);
        assert_eq!(probe_accuracy(&zero, &f, &[0, 1, 0, 1]).unwrap(), 0.5);
        let clf = ProbeClassifier {
            w: Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap(),
            b: Tensor::zeros(&[2]),
        };
        assert_eq!(probe_accuracy(&clf, &f, &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(probe_accuracy(&clf, &f, &[1, 0, 1, 1]).unwrap(), 0.75);
        let none = Features::<f64> { d: 1, data: vec![] };
        assert!(probe_accuracy(&clf, &none, &[]).is_err());
    }

    #[test]
    fn probe_training_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64 * 2.0 - 1.0, 0.1 * i as f64]).collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let f = Features::from_rows(&rows).unwrap();
        let cfg = ProbeConfig {
            min_steps: 50,
            ..Default::default()
        };
        let a = train_probe(&f, &labels, 5, &cfg).unwrap();
        let b = train_probe(&f, &labels, 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train_probe(&f, &labels[..3], 5, &cfg).is_err());
    }

    #[test]
    fn effective_epochs() {
        let cfg = ProbeConfig::default();
        assert_eq!(cfg.effective_epochs(2000), 500);
        let literal = ProbeConfig {
            min_steps: 0,
            ..cfg
        };
        assert_eq!(literal.effective_epochs(2000), 1);
    }

    #[test]
    fn curve_max_prefers_shallow_layer() {
        let cells = (0..3)
            .flat_map(|l| {
                TokenType::ALL.into_iter().map(move |t| CurveCell {
                    layer: l,
                    token_type: t,
                    accuracy: if l == 0 { 0.5 } else { 0.9 },
                })
            })
            .collect();
        let c = assemble_curve(TaskKind::Figure, 0, 3, 10, "x".into(), cells).unwrap();
        assert_eq!(c.max(TokenType::Last), Some((1, 0.9)));
        assert_eq!(c.series(TokenType::Image), vec![0.5, 0.9, 0.9]);
    }
}
