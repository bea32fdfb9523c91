//! Finite-difference gradient checks on randomly composed tape graphs.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const H: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Step {
    Linear,
    LayerNorm,
    Gelu,
    Attention,
    Residual,
    Gate,
}

#[derive(Debug, Clone, Copy)]
pub enum Head {
    CrossEntropy,
    MeanSquare,
    Sum,
}

/// A randomly composed graph: embedding, a chain of steps with at least
/// one attention block, and a scalar head.
#[derive(Debug, Clone)]
pub struct Graph {
    pub rows: usize,
    pub d: usize,
    pub heads: usize,
    pub vocab: usize,
    pub ids: Vec<Option<usize>>,
    pub segments: Vec<Range<usize>>,
    pub steps: Vec<Step>,
    pub head: Head,
    pub targets: Vec<Option<usize>>,
    pub shapes: Vec<Vec<usize>>,
}

/// Draws a graph and a parameter set for it.
pub fn random_graph<R: Rng>(rng: &mut R) -> (Graph, Vec<Tensor<f64>>) {
    let heads = rng.gen_range(1..=2);
    // Width 2 makes layer norm a near step function of x0 - x1, where
    // central differences lose accuracy long before the tape does.
    let d = if heads == 1 { rng.gen_range(4..=8) } else { 2 * rng.gen_range(2..=4) };
    let rows = rng.gen_range(3..=7);
    let vocab = rng.gen_range(3..=6);
    let cut = rng.gen_range(1..rows);
    let segments = if rng.gen_bool(0.5) {
        vec![0..cut, cut..rows]
    } else {
        vec![0..rows]
    };
    let ids = (0..rows)
        .map(|_| rng.gen_bool(0.85).then(|| rng.gen_range(0..vocab)))
        .collect();
    let n_steps = rng.gen_range(2..=5);
    let mut steps: Vec<Step> = (0..n_steps)
        .map(|_| match rng.gen_range(0..6) {
            0 => Step::Linear,
            1 => Step::LayerNorm,
            2 => Step::Gelu,
            3 => Step::Attention,
            4 => Step::Residual,
            _ => Step::Gate,
        })
        .collect();
    // Every graph carries at least one attention block.
    let at = rng.gen_range(0..=steps.len());
    steps.insert(at, Step::Attention);
    let head = match rng.gen_range(0..3) {
        0 => Head::CrossEntropy,
        1 => Head::MeanSquare,
        _ => Head::Sum,
    };
    let mut targets: Vec<Option<usize>> = (0..rows)
        .map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..vocab)))
        .collect();
    targets[0] = Some(0);

    let mut shapes = vec![vec![vocab, d], vec![rows, d]];
    for s in &steps {
        match s {
            Step::Linear => shapes.extend([vec![d, d], vec![d]]),
            Step::LayerNorm => shapes.extend([vec![d], vec![d]]),
            Step::Attention => shapes.extend([vec![d, d], vec![d, d], vec![d, d]]),
            Step::Gate => shapes.push(vec![rows, d]),
            Step::Gelu | Step::Residual => {}
        }
    }
    if let Head::CrossEntropy = head {
        shapes.extend([vec![vocab, d], vec![vocab]]);
    }
    let params = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(s, data).unwrap()
        })
        .collect();
    let g = Graph {
        rows,
        d,
        heads,
        vocab,
        ids,
        segments,
        steps,
        head,
        targets,
        shapes,
    };
    (g, params)
}

pub fn build(g: &Graph, params: &[Tensor<f64>], tape: &mut Tape<f64>) -> (Var, Vec<Var>) {
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let mut it = leaves.iter().copied();
    let mut next = || it.next().unwrap();
    let table = next();
    let offset = next();
    let e = tape.embedding(table, &g.ids).unwrap();
    let mut x = tape.add(e, offset).unwrap();
    let mut prev = x;
    for s in &g.steps {
        let y = match s {
            Step::Linear => {
                let (w, b) = (next(), next());
                tape.linear(x, w, Some(b)).unwrap()
            }
            Step::LayerNorm => {
                let (gamma, beta) = (next(), next());
                tape.layer_norm(x, gamma, beta, 1e-5).unwrap()
            }
            Step::Gelu => tape.gelu(x).unwrap(),
            Step::Attention => {
                let (wq, wk, wv) = (next(), next(), next());
                let q = tape.linear(x, wq, None).unwrap();
                let k = tape.linear(x, wk, None).unwrap();
                let v = tape.linear(x, wv, None).unwrap();
                tape.causal_attention(q, k, v, &g.segments, g.heads).unwrap()
            }
            Step::Residual => tape.add(x, prev).unwrap(),
            Step::Gate => {
                let m = next();
                tape.mul(x, m).unwrap()
            }
        };
        prev = x;
        x = y;
    }
    let loss = match g.head {
        Head::CrossEntropy => {
            let (w, b) = (next(), next());
            let logits = tape.linear(x, w, Some(b)).unwrap();
            tape.softmax_cross_entropy(logits, &g.targets).unwrap()
        }
        Head::MeanSquare => {
            let sq = tape.mul(x, x).unwrap();
            tape.mean(sq).unwrap()
        }
        Head::Sum => {
            let t = tape.transpose(x).unwrap();
            let gram = tape.matmul(t, x).unwrap();
            tape.sum(gram).unwrap()
        }
    };
    (loss, leaves)
}

pub fn loss_at(g: &Graph, params: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (l, _) = build(g, params, &mut tape);
    tape.value(l).item()
}

/// Norm-wise relative error between the tape gradient and the central
/// difference estimate over every parameter entry of the graph.
pub fn relative_error(g: &Graph, params: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, leaves) = build(g, params, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut work = params.to_vec();
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).unwrap().to_vec();
        for j in 0..params[pi].len() {
            let x0 = params[pi].data()[j];
            work[pi].data_mut()[j] = x0 + H;
            let up = loss_at(g, &work);
            work[pi].data_mut()[j] = x0 - H;
            let down = loss_at(g, &work);
            work[pi].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * H);
            diff += Float::powi(analytic[j] - numeric, 2);
            a_norm += Float::powi(analytic[j], 2);
            n_norm += Float::powi(numeric, 2);
        }
    }
    Float::sqrt(diff) / Float::sqrt(a_norm).max(Float::sqrt(n_norm)).max(1e-12)
}

