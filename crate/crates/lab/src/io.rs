//! On-disk formats: checkpoints, dataset files, CSV and JSON artifacts.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use plab_core::image::Image;
use plab_core::model::{Model, ModelConfig};
use plab_core::probing::{CurveCell, LayerAccuracyCurve};
use plab_core::response::{ResponseRecord, GapReport};
use plab_core::taskgen::{Dataset, Split, TaskKind, TaskSample};
use plab_core::{Real, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Header (magic, version, model config), then one record per parameter:
/// name, extents, and little-endian f32 values.
pub fn checkpoint_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.d_model, c.n_layers, c.n_heads, c.vocab_size, c.patch_px, c.image_px, c.max_seq] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn model_from_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 7];
    for v in f.iter_mut() {
        *v = r.u32()? as usize;
    }
    let cfg = ModelConfig {
        d_model: f[0],
        n_layers: f[1],
        n_heads: f[2],
        vocab_size: f[3],
        patch_px: f[4],
        image_px: f[5],
        max_seq: f[6],
    };
    let n = r.u32()? as usize;
    let mut named = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        named.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Model::from_named(cfg, named)?)
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::at(path, e))?;
    model_from_checkpoint(&bytes)
}

/// One line per sample: base64 image, question, label or gold answer, kind.
pub fn dataset_text(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for s in &ds.samples {
        let answer = s.target_text();
        if [s.question.as_str(), answer.as_str()]
            .iter()
            .any(|f| f.contains(['\t', '\n']))
        {
            return Err(Error::Format("sample text contains a tab or newline".into()));
        }
        out.push_str(&B64.encode(s.image.to_bytes()));
        out.push('\t');
        out.push_str(&s.question);
        out.push('\t');
        out.push_str(&answer);
        out.push('\t');
        out.push_str(s.kind.tag());
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_dataset(text: &str, split: Split, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut kind = None;
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 fields, found {}", i + 1, f.len())));
        }
        let bytes = B64
            .decode(f[0])
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let size = ((bytes.len() / 12) as f64).sqrt().round() as usize;
        let image = Image::from_bytes(size, &bytes)?;
        let k: TaskKind = f[3].parse()?;
        if kind.is_some_and(|prev| prev != k) {
            return Err(Error::Format(format!("line {}: mixed task kinds", i + 1)));
        }
        kind = Some(k);
        let (label, gold_answer) = if k.is_binary() {
            let y = match f[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Format(format!("line {}: bad label {other:?}", i + 1))),
            };
            (Some(y), None)
        } else {
            (None, Some(f[2].to_string()))
        };
        samples.push(TaskSample {
            image,
            question: f[1].to_string(),
            label,
            gold_answer,
            kind: k,
        });
    }
    let kind = kind.ok_or_else(|| Error::Format("empty dataset file".into()))?;
    Ok(Dataset {
        kind,
        split,
        seed,
        samples,
    })
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Shortest decimal that parses back to the same `f64`, so CSV values
/// match the JSON artifacts exactly.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

pub const CURVE_HEADER: [&str; 6] = ["layer", "token_type", "accuracy", "n_test", "task", "seed"];

pub fn curve_csv(curve: &LayerAccuracyCurve) -> Result<Vec<u8>> {
    csv_bytes(&CURVE_HEADER, |w| {
        for c in &curve.cells {
            w.write_record([
                c.layer.to_string(),
                c.token_type.to_string(),
                fmt_num(c.accuracy),
                curve.n_test.to_string(),
                curve.task.to_string(),
                curve.seed.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn parse_curve_csv(bytes: &[u8]) -> Result<LayerAccuracyCurve> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut cells = Vec::new();
    let mut meta = None;
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::Format(format!("curve csv: bad {what}"));
        cells.push(CurveCell {
            layer: field(0).parse().map_err(|_| bad("layer"))?,
            token_type: field(1).parse()?,
            accuracy: field(2).parse().map_err(|_| bad("accuracy"))?,
        });
        let n_test: usize = field(3).parse().map_err(|_| bad("n_test"))?;
        let task: TaskKind = field(4).parse()?;
        let seed: u64 = field(5).parse().map_err(|_| bad("seed"))?;
        meta = Some((n_test, task, seed));
    }
    let (n_test, task, seed) = meta.ok_or_else(|| Error::Format("empty curve csv".into()))?;
    let n_layers = cells.iter().map(|c| c.layer + 1).max().unwrap_or(0);
    Ok(plab_core::probing::assemble_curve(
        task,
        seed,
        n_layers,
        n_test,
        format!("{task}/{seed}"),
        cells,
    )?)
}

pub fn responses_csv(records: &[ResponseRecord]) -> Result<Vec<u8>> {
    csv_bytes(&["index", "question", "generated", "extracted", "label", "correct"], |w| {
        for (i, r) in records.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.question.clone(),
                r.generated.clone(),
                r.extracted.to_string(),
                r.label.to_string(),
                r.correct.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Figure-style plot data: each curve point paired with the response
/// accuracy reference line.
pub fn plot_csv(curve: &LayerAccuracyCurve, a_resp: f64) -> Result<Vec<u8>> {
    csv_bytes(&["task", "token_type", "layer", "probe_accuracy", "response_accuracy"], |w| {
        for c in &curve.cells {
            w.write_record([
                curve.task.to_string(),
                c.token_type.to_string(),
                c.layer.to_string(),
                fmt_num(c.accuracy),
                fmt_num(a_resp),
            ])?;
        }
        Ok(())
    })
}

pub fn write_gap(path: &Path, g: &GapReport) -> Result<()> {
    write_json(path, g)
}

/// Generic flat CSV from a header and string rows.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    csv_bytes(header, |w| {
        for r in rows {
            w.write_record(r)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use plab_core::taskgen::{generate, TaskGenConfig};

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            image_px: 8,
            max_seq: 96,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::new(cfg, 3).unwrap();
        let bytes = checkpoint_bytes(&m);
        let back: Model<f32> = model_from_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_checkpoint::<f64>(&bad).is_err());
        assert!(model_from_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        for kind in [TaskKind::Structure, TaskKind::DocQa] {
            let ds = generate(kind, 6, 2, Split::Test, &TaskGenConfig { image_px: 16 }).unwrap();
            let text = dataset_text(&ds).unwrap();
            assert_eq!(parse_dataset(&text, Split::Test, 2).unwrap(), ds);
        }
    }
}
