//! Scoped worker threads with order-preserving results.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use plab_core::model::Model;
use plab_core::probing::FeatureTable;
use plab_core::response::{Query, Responder};
use plab_core::taskgen::Dataset;
use plab_core::Real;

/// Maps `f` over `items` on up to `workers` threads. Output order matches
/// input order whatever the schedule, and the first error wins.
pub fn par_map<I, O, E, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<O, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Splits generation across threads over a shared read-only model.
pub struct ParallelResponder<'a, T> {
    pub model: &'a Model<T>,
    pub workers: usize,
}

impl<T: Real> Responder for ParallelResponder<'_, T> {
    fn respond(&self, queries: &[Query<'_>], max_new: usize) -> plab_core::Result<Vec<String>> {
        let chunk = queries.len().div_ceil(self.workers.max(1)).max(1);
        let parts: Vec<&[Query<'_>]> = queries.chunks(chunk).collect();
        let out = par_map(&parts, self.workers, |qs| self.model.respond(qs, max_new))?;
        Ok(out.into_iter().flatten().collect())
    }
}

/// Feature extraction with the dataset split into contiguous shards.
pub fn extract_features<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    workers: usize,
) -> plab_core::Result<FeatureTable<T>> {
    let chunk = ds.len().div_ceil(workers.max(1)).max(1);
    let shards: Vec<Dataset> = ds
        .samples
        .chunks(chunk)
        .map(|s| Dataset {
            samples: s.to_vec(),
            ..ds.clone_meta()
        })
        .collect();
    let tables = par_map(&shards, workers, |s| plab_core::probing::extract_features(model, s))?;
    let mut it = tables.into_iter();
    let mut first = it.next().ok_or(plab_core::Error::Contract("empty dataset".into()))?;
    for t in it {
        first.labels.extend(t.labels);
        first.forward_passes += t.forward_passes;
        for (a, b) in first.cells.iter_mut().zip(t.cells) {
            a.data.extend(b.data);
        }
    }
    Ok(first)
}

trait CloneMeta {
    fn clone_meta(&self) -> Dataset;
}

impl CloneMeta for Dataset {
    fn clone_meta(&self) -> Dataset {
        Dataset {
            kind: self.kind,
            split: self.split,
            seed: self.seed,
            samples: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..50).collect();
        let out: Vec<u64> = par_map(&items, 4, |&x| Ok::<_, ()>(x * x)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        let err = par_map(&items, 3, |&x| if x == 7 { Err(x) } else { Ok(x) });
        assert_eq!(err, Err(7));
    }
}
