//! Prompting, label extraction, response accuracy, the probing/response gap
//! and ANLS.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::Image;
use crate::model::{tokenizer, Model, Sequence};
use crate::probing::{LayerAccuracyCurve, TokenType};
use crate::taskgen::Dataset;
use crate::Real;

pub const PROMPT_SUFFIX: &str = "If yes, answer 1; if no, answer 0. Please answer with numbers only.";

/// Token budget for binary answers.
pub const BINARY_MAX_NEW: usize = 4;
/// Token budget for open-ended answers.
pub const OPEN_MAX_NEW: usize = 8;
/// Prompts per generation batch.
const GEN_BATCH: usize = 64;

pub fn format_prompt(question: &str) -> Result<String> {
    if question.is_empty() {
        return Err(contract("question must be non-empty"));
    }
    Ok(format!("{question} {PROMPT_SUFFIX}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extracted {
    Label(u8),
    Unparseable,
}

impl Extracted {
    pub fn label(&self) -> Option<u8> {
        match self {
            Extracted::Label(y) => Some(*y),
            Extracted::Unparseable => None,
        }
    }
}

impl core::fmt::Display for Extracted {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Extracted::Label(y) => write!(f, "{y}"),
            Extracted::Unparseable => f.write_str("unparseable"),
        }
    }
}

/// Whole-token scan for `1`/`yes` and `0`/`no`, case-insensitive. A
/// response naming both polarities, or neither, is unparseable.
pub fn extract_label(response: &str) -> Extracted {
    let mut pos = false;
    let mut neg = false;
    for tok in response.split(|c: char| !c.is_alphanumeric()) {
        if tok == "1" || tok.eq_ignore_ascii_case("yes") {
            pos = true;
        } else if tok == "0" || tok.eq_ignore_ascii_case("no") {
            neg = true;
        }
    }
    match (pos, neg) {
        (true, false) => Extracted::Label(1),
        (false, true) => Extracted::Label(0),
        _ => Extracted::Unparseable,
    }
}

/// A prompt and the image shown before it.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub prompt: String,
    pub image: &'a Image,
}

impl<'a> Query<'a> {
    /// Binary question wrapped in the answer-format template.
    pub fn binary(question: &str, image: &'a Image) -> Result<Self> {
        Ok(Self {
            prompt: format_prompt(question)?,
            image,
        })
    }

    /// Open-ended question, asked verbatim.
    pub fn open(question: &str, image: &'a Image) -> Result<Self> {
        if question.is_empty() {
            return Err(contract("question must be non-empty"));
        }
        Ok(Self {
            prompt: question.to_string(),
            image,
        })
    }

    /// Query a sample is asked with, by task kind.
    pub fn for_sample(s: &'a crate::taskgen::TaskSample) -> Result<Self> {
        if s.kind.is_binary() {
            Self::binary(&s.question, &s.image)
        } else {
            Self::open(&s.question, &s.image)
        }
    }
}

/// Anything that answers prompts with text.
pub trait Responder {
    fn respond(&self, queries: &[Query<'_>], max_new: usize) -> Result<Vec<String>>;
}

impl<T: Real> Responder for Model<T> {
    fn respond(&self, queries: &[Query<'_>], max_new: usize) -> Result<Vec<String>> {
        let ids: Vec<Vec<usize>> = queries
            .iter()
            .map(|q| tokenizer::encode(&q.prompt))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(queries.len());
        for (qs, ids) in queries.chunks(GEN_BATCH).zip(ids.chunks(GEN_BATCH)) {
            let seqs: Vec<Sequence<'_>> = qs
                .iter()
                .zip(ids)
                .map(|(q, t)| Sequence {
                    text: t,
                    image: q.image,
                })
                .collect();
            out.extend(self.generate_batch(&seqs, max_new)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub question: String,
    pub prompt: String,
    pub generated: String,
    pub extracted: Extracted,
    pub label: u8,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEval {
    pub a_resp: f64,
    pub unparseable_rate: f64,
    pub records: Vec<ResponseRecord>,
}

/// Scores generated answers against labels; unparseable answers count as
/// wrong and are tallied separately.
pub fn score_responses(questions: &[String], generated: &[String], labels: &[u8]) -> Result<ResponseEval> {
    if labels.is_empty() {
        return Err(contract("response accuracy over an empty dataset"));
    }
    if questions.len() != labels.len() || generated.len() != labels.len() {
        return Err(contract("questions, responses and labels must align"));
    }
    let mut records = Vec::with_capacity(labels.len());
    let (mut hits, mut unparseable) = (0usize, 0usize);
    for ((q, g), &y) in questions.iter().zip(generated).zip(labels) {
        let extracted = extract_label(g);
        let correct = extracted == Extracted::Label(y);
        hits += correct as usize;
        unparseable += (extracted == Extracted::Unparseable) as usize;
        records.push(ResponseRecord {
            question: q.clone(),
            prompt: format_prompt(q)?,
            generated: g.clone(),
            extracted,
            label: y,
            correct,
        });
    }
    let n = labels.len() as f64;
    Ok(ResponseEval {
        a_resp: hits as f64 / n,
        unparseable_rate: unparseable as f64 / n,
        records,
    })
}

pub fn response_accuracy(responder: &dyn Responder, ds: &Dataset) -> Result<ResponseEval> {
    if !ds.kind.is_binary() {
        return Err(contract("response accuracy needs a binary task"));
    }
    if ds.is_empty() {
        return Err(contract("response accuracy over an empty dataset"));
    }
    let queries: Vec<Query<'_>> = ds
        .samples
        .iter()
        .map(|s| Query::binary(&s.question, &s.image))
        .collect::<Result<_>>()?;
    let generated = responder.respond(&queries, BINARY_MAX_NEW)?;
    let questions: Vec<String> = ds.samples.iter().map(|s| s.question.clone()).collect();
    let labels: Vec<u8> = ds
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| contract("binary sample without a label")))
        .collect::<Result<_>>()?;
    score_responses(&questions, &generated, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub a_resp: f64,
    pub max_lp: f64,
    pub argmax_layer: usize,
    pub token_type: TokenType,
    pub gap: f64,
}

/// Best probing accuracy over layers for `ttype` minus response accuracy.
/// Ties go to the shallowest layer.
pub fn gap(curve: &LayerAccuracyCurve, a_resp: f64, ttype: TokenType) -> Result<GapReport> {
    let (argmax_layer, max_lp) = curve
        .max(ttype)
        .ok_or_else(|| contract(format!("curve has no {ttype} entries")))?;
    Ok(GapReport {
        a_resp,
        max_lp,
        argmax_layer,
        token_type: ttype,
        gap: max_lp - a_resp,
    })
}

/// Character-level edit distance (unit-cost insert, delete, substitute).
pub fn levenshtein(s: &str, t: &str) -> usize {
    let a: Vec<char> = s.chars().collect();
    let b: Vec<char> = t.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(s, t) / max(|s|, |t|)`, and 1 for two empty strings.
pub fn normalized_lev(s: &str, t: &str) -> f64 {
    let n = s.chars().count().max(t.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(s, t) as f64 / n as f64
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Mean over items of the best normalized similarity to any gold answer,
/// zeroed below `tau`.
pub fn anls(predictions: &[String], golds: &[Vec<String>], tau: f64) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(contract(format!(
            "{} predictions for {} gold sets",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(contract("ANLS over an empty set"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(contract("tau must lie in [0, 1]"));
    }
    let mut total = 0.0;
    for (p, gs) in predictions.iter().zip(golds) {
        if gs.is_empty() {
            return Err(contract("item without gold answers"));
        }
        let p = normalize(p);
        let s = gs
            .iter()
            .map(|g| normalized_lev(&p, &normalize(g)))
            .fold(0.0, f64::max);
        total += if s >= tau { s } else { 0.0 };
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenRecord {
    pub question: String,
    pub generated: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnlsEval {
    pub anls: f64,
    pub tau: f64,
    pub records: Vec<OpenRecord>,
}

/// Generates answers for an open-ended dataset and scores them with ANLS.
pub fn anls_eval(responder: &dyn Responder, ds: &Dataset, tau: f64) -> Result<AnlsEval> {
    if ds.kind.is_binary() {
        return Err(contract("ANLS evaluation needs an open-ended task"));
    }
    let queries: Vec<Query<'_>> = ds
        .samples
        .iter()
        .map(|s| Query::open(&s.question, &s.image))
        .collect::<Result<_>>()?;
    let generated = responder.respond(&queries, OPEN_MAX_NEW)?;
    let golds: Vec<String> = ds
        .samples
        .iter()
        .map(|s| s.gold_answer.clone().ok_or_else(|| contract("open sample without a gold answer")))
        .collect::<Result<_>>()?;
    let gold_sets: Vec<Vec<String>> = golds.iter().map(|g| alloc::vec![g.clone()]).collect();
    let anls = anls(&generated, &gold_sets, tau)?;
    let records = ds
        .samples
        .iter()
        .zip(generated)
        .zip(golds)
        .map(|((s, generated), gold)| OpenRecord {
            question: s.question.clone(),
            generated,
            gold,
        })
        .collect();
    Ok(AnlsEval { anls, tau, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn prompt_template() {
        assert_eq!(
            format_prompt("Is the background black?").unwrap(),
            "Is the background black? If yes, answer 1; if no, answer 0. Please answer with numbers only."
        );
        assert!(format_prompt("").is_err());
        let a = format_prompt("Is the shape red?").unwrap();
        let b = format_prompt("What?").unwrap();
        assert!(a.ends_with(PROMPT_SUFFIX) && b.ends_with(PROMPT_SUFFIX));
    }

    #[test]
    fn extraction() {
        assert_eq!(extract_label("1"), Extracted::Label(1));
        assert_eq!(extract_label("Yes."), Extracted::Label(1));
        assert_eq!(extract_label("The answer is 0"), Extracted::Label(0));
        assert_eq!(extract_label("0 or 1"), Extracted::Unparseable);
        assert_eq!(extract_label("10"), Extracted::Unparseable);
        assert_eq!(extract_label(""), Extracted::Unparseable);
        assert_eq!(extract_label("NO"), Extracted::Label(0));
        assert_eq!(extract_label("  1  "), extract_label("1"));
    }

    #[test]
    fn counting_accuracy() {
        let q: Vec<String> = (0..10).map(|i| format!("q{i}?")).collect();
        let labels = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let mut gen: Vec<String> = labels.iter().map(|y: &u8| y.to_string()).collect();
        gen[0] = "0".into();
        gen[1] = "maybe".into();
        gen[2] = "0 1".into();
        let r = score_responses(&q, &gen, &labels).unwrap();
        assert!((r.a_resp - 0.7).abs() < 1e-12);
        assert!((r.unparseable_rate - 0.2).abs() < 1e-12);
        let bad: Vec<String> = vec!["?".into(); 10];
        assert_eq!(score_responses(&q, &bad, &labels).unwrap().a_resp, 0.0);
        assert!(score_responses(&[], &[], &[]).is_err());
    }

    #[test]
    fn edit_distances() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert!((normalized_lev("spencerlan", "spencerian") - 0.9).abs() < 1e-12);
        assert_eq!(normalized_lev("abc", "xyz"), 0.0);
        assert_eq!(normalized_lev("", ""), 1.0);
    }

    #[test]
    fn anls_threshold() {
        let g = |s: &str| vec![String::from(s)];
        assert_eq!(anls(&["Title ".into()], &[g("title")], 0.5).unwrap(), 1.0);
        assert!((anls(&["spencerlan".into()], &[g("spencerian")], 0.5).unwrap() - 0.9).abs() < 1e-12);
        // 3 edits over 5 characters
        assert_eq!(anls(&["abxyz".into()], &[g("abcde")], 0.5).unwrap(), 0.0);
        assert!(anls(&["a".into()], &[], 0.5).is_err());
    }
}
