//! Procedural visual-document tasks.
//!
//! Four balanced binary tasks (visual attributes, word recognition, layout
//! structure, bar-chart comparison) and an open-ended document QA track.
//! Every question names the attribute it asks about, and for negatives the
//! named value is drawn independently of the image, so the image alone never
//! reveals the label.

pub mod font;
pub mod palette;
mod perturb;

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::image::{Image, Rgb};
use crate::init::{self, derive_seed};
use crate::response::{extract_label, Extracted, Query, Responder, BINARY_MAX_NEW};
use font::{draw_text, text_width, ALPHABET, GLYPH_H};
use palette::{title_case, MARKER, PALETTE, WHITE};
pub use perturb::{perturb_word, perturb_word_with};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    VisualAttr,
    WordRec,
    Structure,
    Figure,
    DocQa,
}

impl TaskKind {
    pub const BINARY: [TaskKind; 4] = [
        TaskKind::VisualAttr,
        TaskKind::WordRec,
        TaskKind::Structure,
        TaskKind::Figure,
    ];
    pub const ALL: [TaskKind; 5] = [
        TaskKind::VisualAttr,
        TaskKind::WordRec,
        TaskKind::Structure,
        TaskKind::Figure,
        TaskKind::DocQa,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            TaskKind::VisualAttr => "visual_attr",
            TaskKind::WordRec => "word_rec",
            TaskKind::Structure => "structure",
            TaskKind::Figure => "figure",
            TaskKind::DocQa => "doc_qa",
        }
    }

    pub fn is_binary(&self) -> bool {
        *self != TaskKind::DocQa
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub image: Image,
    pub question: String,
    /// Ground truth for binary tasks.
    pub label: Option<u8>,
    /// Ground truth for document QA.
    pub gold_answer: Option<String>,
    pub kind: TaskKind,
}

impl TaskSample {
    /// Text the model is trained to emit for this sample.
    pub fn target_text(&self) -> String {
        match (&self.label, &self.gold_answer) {
            (Some(y), _) => y.to_string(),
            (None, Some(g)) => g.clone(),
            (None, None) => String::new(),
        }
    }

    /// 64-bit FNV-1a digest of the full sample content.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.image.to_bytes());
        h.write(self.question.as_bytes());
        h.write(&[0xff]);
        h.write(self.target_text().as_bytes());
        h.write(self.kind.tag().as_bytes());
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().filter_map(|s| s.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Some(1)).count()
    }

    pub fn is_balanced(&self) -> bool {
        let pos = self.positives();
        let neg = self.len() - pos;
        pos.abs_diff(neg) <= 1
    }
}

/// Geometry shared with the model's image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub image_px: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self { image_px: 32 }
    }
}

impl TaskGenConfig {
    fn validate(&self) -> Result<()> {
        if self.image_px < 12 {
            return Err(config("task images need at least 12 pixels per side"));
        }
        Ok(())
    }

    /// Longest word that fits on one line of the image, capped at 6.
    pub fn max_word_len(&self) -> usize {
        ((self.image_px + 1) / font::ADVANCE).min(6)
    }

    fn layout_rows(&self) -> usize {
        (self.image_px / 6).clamp(2, 3)
    }
}

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const REGION_TYPES: [&str; 5] = ["title", "text", "list", "figure", "table"];

/// Generates `n` samples of one kind. The sample stream is a pure function
/// of `(kind, n, seed, split, cfg)`.
pub fn generate(kind: TaskKind, n: usize, seed: u64, split: Split, cfg: &TaskGenConfig) -> Result<Dataset> {
    generate_excluding(kind, n, seed, split, cfg, &BTreeSet::new())
}

/// Train and test splits from one seed; no test sample repeats a train
/// sample byte for byte.
pub fn generate_pair(
    kind: TaskKind,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &TaskGenConfig,
) -> Result<(Dataset, Dataset)> {
    let train = generate(kind, n_train, seed, Split::Train, cfg)?;
    let seen: BTreeSet<u64> = train.samples.iter().map(|s| s.digest()).collect();
    let test = generate_excluding(kind, n_test, seed, Split::Test, cfg, &seen)?;
    Ok((train, test))
}

pub fn generate_excluding(
    kind: TaskKind,
    n: usize,
    seed: u64,
    split: Split,
    cfg: &TaskGenConfig,
    exclude: &BTreeSet<u64>,
) -> Result<Dataset> {
    cfg.validate()?;
    if n < 2 {
        return Err(config(format!("{kind} needs at least 2 samples to balance labels, got {n}")));
    }
    let mut rng = init::rng(derive_seed(seed, &format!("{}/{}", kind.tag(), split.tag())));
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n);
    for &y in &labels {
        let mut attempts = 0;
        let sample = loop {
            let s = sample_one(kind, y, cfg, &mut rng)?;
            if !exclude.contains(&s.digest()) {
                break s;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(config(format!(
                    "{kind}: cannot find a sample outside the excluded set; image too small"
                )));
            }
        };
        samples.push(sample);
    }
    Ok(Dataset {
        kind,
        split,
        seed,
        samples,
    })
}

fn sample_one(kind: TaskKind, y: u8, cfg: &TaskGenConfig, rng: &mut init::Rng) -> Result<TaskSample> {
    let positive = y == 1;
    let (image, question, gold) = match kind {
        TaskKind::VisualAttr => visual_attr(positive, cfg, rng),
        TaskKind::WordRec => word_rec(positive, cfg, rng)?,
        TaskKind::Structure => structure(positive, cfg, rng),
        TaskKind::Figure => figure(positive, cfg, rng),
        TaskKind::DocQa => doc_qa(cfg, rng),
    };
    let (label, gold_answer) = match gold {
        Some(g) => (None, Some(g)),
        None => (Some(y), None),
    };
    Ok(TaskSample {
        image,
        question,
        label,
        gold_answer,
        kind,
    })
}

fn pick_other(rng: &mut init::Rng, n: usize, not: usize) -> usize {
    let mut j = rng.gen_range(0..n - 1);
    if j >= not {
        j += 1;
    }
    j
}

type Generated = (Image, String, Option<String>);

fn visual_attr(positive: bool, cfg: &TaskGenConfig, rng: &mut init::Rng) -> Generated {
    let px = cfg.image_px;
    let bg = rng.gen_range(0..PALETTE.len());
    let fg = pick_other(rng, PALETTE.len(), bg);
    let shape = rng.gen_range(0..SHAPES.len());
    let size = rng.gen_range((px / 4).max(3)..=px / 2);
    let x0 = rng.gen_range(0..=px - size);
    let y0 = rng.gen_range(0..=px - size);
    let mut img = Image::filled(px, PALETTE[bg].rgb);
    draw_shape(&mut img, SHAPES[shape], x0, y0, size, PALETTE[fg].rgb);
    let question = match rng.gen_range(0..3) {
        0 => {
            let c = if positive { bg } else { pick_other(rng, PALETTE.len(), bg) };
            format!("Is the background {}?", PALETTE[c].name)
        }
        1 => {
            let c = if positive { fg } else { pick_other(rng, PALETTE.len(), fg) };
            format!("Is the shape {}?", PALETTE[c].name)
        }
        _ => {
            let s = if positive { shape } else { pick_other(rng, SHAPES.len(), shape) };
            format!("Is the shape a {}?", SHAPES[s])
        }
    };
    (img, question, None)
}

fn draw_shape(img: &mut Image, shape: &str, x0: usize, y0: usize, size: usize, c: Rgb) {
    match shape {
        "square" => img.fill_rect(x0, y0, size, size, c),
        "circle" => {
            let r = size as f32 / 2.0;
            for dy in 0..size {
                for dx in 0..size {
                    let (fx, fy) = (dx as f32 + 0.5 - r, dy as f32 + 0.5 - r);
                    if fx * fx + fy * fy <= r * r {
                        img.set(x0 + dx, y0 + dy, c);
                    }
                }
            }
        }
        _ => {
            // apex at the top centre, base along the bottom row
            for dy in 0..size {
                let half = (dy as f32 + 1.0) * size as f32 / (2.0 * size as f32);
                let centre = size as f32 / 2.0;
                for dx in 0..size {
                    let fx = dx as f32 + 0.5;
                    if (fx - centre).abs() <= half {
                        img.set(x0 + dx, y0 + dy, c);
                    }
                }
            }
        }
    }
}

fn random_word(rng: &mut init::Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    let letters = ALPHABET.as_bytes();
    (0..len)
        .map(|_| letters[rng.gen_range(0..letters.len())] as char)
        .collect()
}

fn word_rec(positive: bool, cfg: &TaskGenConfig, rng: &mut init::Rng) -> Result<Generated> {
    let px = cfg.image_px;
    let word = random_word(rng, 3, cfg.max_word_len());
    let mut img = Image::filled(px, PALETTE[WHITE].rgb);
    let w = text_width(word.len());
    let x = rng.gen_range(0..=px - w);
    let y = rng.gen_range(0..=px - GLYPH_H);
    draw_text(&mut img, &word, x, y, PALETTE[0].rgb);
    let shown = if positive {
        word
    } else {
        perturb_word_with(&word, rng)?
    };
    Ok((img, format!("Is the text in the image '{shown}'?"), None))
}

/// Cells of the page grid: two columns, `rows` rows.
fn layout_cells(cfg: &TaskGenConfig) -> Vec<(usize, usize, usize, usize)> {
    let px = cfg.image_px;
    let rows = cfg.layout_rows();
    let cw = px / 2;
    let ch = px / rows;
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..2 {
            cells.push((c * cw, r * ch, cw, ch));
        }
    }
    cells
}

fn draw_region(img: &mut Image, kind: &str, x0: usize, y0: usize, w: usize, h: usize, rng: &mut init::Rng) {
    // inset by one pixel so a marker frame never overlaps the texture
    let (x, y, w, h) = (x0 + 1, y0 + 1, w.saturating_sub(2), h.saturating_sub(2));
    let ink = [0.15, 0.15, 0.15];
    let line = [0.55, 0.55, 0.55];
    match kind {
        "title" => img.fill_rect(x, y, w, (h / 2).max(1), ink),
        "text" => {
            for r in (0..h).step_by(2) {
                img.fill_rect(x, y + r, w, 1, line);
            }
        }
        "list" => {
            for r in (0..h).step_by(2) {
                img.set(x, y + r, ink);
                img.fill_rect(x + 2, y + r, w.saturating_sub(2), 1, line);
            }
        }
        "figure" => {
            let c = [PALETTE[3].rgb, PALETTE[4].rgb, PALETTE[6].rgb][rng.gen_range(0..3)];
            img.fill_rect(x, y, w, h, c);
        }
        _ => {
            for r in (0..h).step_by(2) {
                img.fill_rect(x, y + r, w, 1, line);
            }
            for c in (0..w).step_by(2) {
                img.fill_rect(x + c, y, 1, h, line);
            }
        }
    }
}

fn structure(positive: bool, cfg: &TaskGenConfig, rng: &mut init::Rng) -> Generated {
    let cells = layout_cells(cfg);
    let k = rng.gen_range(2..=cells.len().min(REGION_TYPES.len()));
    let mut cell_ids: Vec<usize> = (0..cells.len()).collect();
    cell_ids.shuffle(rng);
    let mut types: Vec<usize> = (0..REGION_TYPES.len()).collect();
    types.shuffle(rng);
    let mut img = Image::filled(cfg.image_px, PALETTE[WHITE].rgb);
    for i in 0..k {
        let (x, y, w, h) = cells[cell_ids[i]];
        draw_region(&mut img, REGION_TYPES[types[i]], x, y, w, h, rng);
    }
    let marked = rng.gen_range(0..k);
    let (x, y, w, h) = cells[cell_ids[marked]];
    img.stroke_rect(x, y, w, h, MARKER);
    let truth = types[marked];
    let asked = if positive {
        truth
    } else {
        pick_other(rng, REGION_TYPES.len(), truth)
    };
    (img, format!("Is the red boxed region a {}?", REGION_TYPES[asked]), None)
}

fn figure(positive: bool, cfg: &TaskGenConfig, rng: &mut init::Rng) -> Generated {
    let px = cfg.image_px;
    let k = rng.gen_range(3..=6usize.min(px / 2));
    let mut colors: Vec<usize> = (0..PALETTE.len()).filter(|&c| c != WHITE).collect();
    colors.shuffle(rng);
    colors.truncate(k);
    let mut heights: Vec<usize> = (2..px).collect();
    heights.shuffle(rng);
    heights.truncate(k);
    let bw = px / k;
    let mut img = Image::filled(px, PALETTE[WHITE].rgb);
    for i in 0..k {
        img.fill_rect(i * bw, px - heights[i], (bw - 1).max(1), heights[i], PALETTE[colors[i]].rgb);
    }
    let ask_min = rng.gen_bool(0.5);
    let extreme = (0..k)
        .min_by_key(|&i| if ask_min { heights[i] as isize } else { -(heights[i] as isize) })
        .unwrap_or(0);
    let named = if positive {
        extreme
    } else {
        pick_other(rng, k, extreme)
    };
    let which = if ask_min { "minimum" } else { "maximum" };
    (
        img,
        format!("Is {} the {which}?", title_case(PALETTE[colors[named]].name)),
        None,
    )
}

fn doc_qa(cfg: &TaskGenConfig, rng: &mut init::Rng) -> Generated {
    let px = cfg.image_px;
    let word = random_word(rng, 3, cfg.max_word_len().min(4));
    let mut img = Image::filled(px, PALETTE[WHITE].rgb);
    let x = rng.gen_range(0..=px - text_width(word.len()));
    draw_text(&mut img, &word, x, 1, PALETTE[0].rgb);
    let body_top = GLYPH_H + 2;
    let body_h = px - body_top;
    let k = rng.gen_range(1..=2usize);
    let bw = px / k;
    for i in 0..k {
        let kind = REGION_TYPES[rng.gen_range(1..REGION_TYPES.len())];
        draw_region(&mut img, kind, i * bw, body_top, bw, body_h, rng);
    }
    (img, "What is the title?".into(), Some(word))
}

/// Outcome of hard-sample filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub dataset: Dataset,
    pub total: usize,
    /// Samples answered incorrectly, before re-balancing.
    pub incorrect: usize,
    /// `incorrect / total`; the balanced set is `dataset`.
    pub retention: f64,
}

/// Keeps the samples the responder gets wrong (unparseable answers count as
/// wrong), then truncates the majority label to restore balance.
pub fn filter_hard(ds: &Dataset, responder: &dyn Responder) -> Result<FilterReport> {
    if !ds.kind.is_binary() {
        return Err(contract("hard-sample filtering applies to binary tasks only"));
    }
    let queries: Vec<Query<'_>> = ds
        .samples
        .iter()
        .map(|s| Query::binary(&s.question, &s.image))
        .collect::<Result<_>>()?;
    let answers = responder.respond(&queries, BINARY_MAX_NEW)?;
    let mut kept: Vec<TaskSample> = ds
        .samples
        .iter()
        .zip(&answers)
        .filter(|(s, a)| match extract_label(a) {
            Extracted::Label(y) => Some(y) != s.label,
            Extracted::Unparseable => true,
        })
        .map(|(s, _)| s.clone())
        .collect();
    let incorrect = kept.len();
    let pos = kept.iter().filter(|s| s.label == Some(1)).count();
    let neg = kept.len() - pos;
    let (major, excess) = if pos > neg + 1 {
        (1, pos - neg - 1)
    } else if neg > pos + 1 {
        (0, neg - pos - 1)
    } else {
        (0, 0)
    };
    let mut dropped = 0;
    while dropped < excess {
        if let Some(i) = kept.iter().rposition(|s| s.label == Some(major)) {
            kept.remove(i);
            dropped += 1;
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyFilter {
            kept: 0,
            total: ds.len(),
        });
    }
    let retention = incorrect as f64 / ds.len() as f64;
    Ok(FilterReport {
        dataset: Dataset {
            samples: kept,
            ..ds.clone()
        },
        total: ds.len(),
        incorrect,
        retention,
    })
}

/// Fraction of pixels equal to `c`.
pub fn color_fraction(img: &Image, c: Rgb) -> f64 {
    let n = img.size() * img.size();
    let hits = (0..n)
        .filter(|&i| img.get(i % img.size(), i / img.size()) == c)
        .count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TaskGenConfig {
        TaskGenConfig { image_px: 16 }
    }

    #[test]
    fn balanced_labels() {
        for kind in TaskKind::BINARY {
            let ds = generate(kind, 100, 3, Split::Train, &cfg()).unwrap();
            assert_eq!(ds.positives(), 50, "{kind}");
            let odd = generate(kind, 7, 3, Split::Train, &cfg()).unwrap();
            assert!(odd.is_balanced());
            assert!(odd.samples.iter().all(|s| s.label.is_some() && s.gold_answer.is_none()));
        }
        let qa = generate(TaskKind::DocQa, 10, 3, Split::Train, &cfg()).unwrap();
        assert!(qa.samples.iter().all(|s| s.label.is_none() && s.gold_answer.is_some()));
    }

    #[test]
    fn too_few_samples_is_a_config_error() {
        assert!(matches!(
            generate(TaskKind::Figure, 1, 0, Split::Train, &cfg()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in TaskKind::ALL {
            let a = generate(kind, 20, 9, Split::Test, &cfg()).unwrap();
            let b = generate(kind, 20, 9, Split::Test, &cfg()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn word_rec_negatives_differ_and_positives_match() {
        let ds = generate(TaskKind::WordRec, 200, 1, Split::Train, &cfg()).unwrap();
        for s in &ds.samples {
            assert!(s.question.starts_with("Is the text in the image '"));
        }
    }

    #[test]
    fn structure_marker_is_a_single_frame() {
        let c = TaskGenConfig { image_px: 32 };
        let ds = generate(TaskKind::Structure, 100, 4, Split::Train, &c).unwrap();
        for s in &ds.samples {
            let img = &s.image;
            let red: Vec<(usize, usize)> = (0..32 * 32)
                .map(|i| (i % 32, i / 32))
                .filter(|&(x, y)| img.get(x, y) == MARKER)
                .collect();
            let (x0, x1) = (red.iter().map(|p| p.0).min().unwrap(), red.iter().map(|p| p.0).max().unwrap());
            let (y0, y1) = (red.iter().map(|p| p.1).min().unwrap(), red.iter().map(|p| p.1).max().unwrap());
            // every red pixel lies on the border of the bounding box, and the
            // whole border is red: one closed rectangle
            assert!(red.iter().all(|&(x, y)| x == x0 || x == x1 || y == y0 || y == y1));
            assert_eq!(red.len(), 2 * (x1 - x0 + 1) + 2 * (y1 - y0 + 1) - 4);
        }
    }
}
