//! Per-epoch batch streams over source, target-labeled and target-unlabeled ids.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, Toggles};
use crate::pools::PoolState;

/// Named RNG streams; each run draws from `derive_seed(seed, stream, epoch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    ModelInit = 1,
    PoolInit = 2,
    SourceOrder = 3,
    LabeledOrder = 4,
    UnlabeledOrder = 5,
    Augment = 6,
    RandomAcquire = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: RngStream, epoch: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ epoch as u64)
}

pub fn derive_rng(seed: u64, stream: RngStream, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch))
}

/// Endless reshuffling cycle over a fixed id set.
#[derive(Debug, Clone)]
pub struct Stream {
    ids: Vec<String>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(mut ids: Vec<String>, rng: ChaCha8Rng) -> Self {
        ids.sort();
        let mut s = Stream {
            order: (0..ids.len()).collect(),
            ids,
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `b` ids; wraps into a fresh shuffled pass when exhausted. Empty if the stream is.
    pub fn next_batch(&mut self, b: usize) -> Vec<String> {
        if self.ids.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.ids[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// One training step's sample ids; an empty list means the term is inactive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub source: Vec<String>,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

/// Yields the batches of one epoch.
#[derive(Debug, Clone)]
pub struct BatchAssembler {
    source: Option<Stream>,
    labeled: Option<Stream>,
    unlabeled: Option<Stream>,
    batch_size: usize,
    pub steps: usize,
    done: usize,
}

impl BatchAssembler {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pool: &PoolState,
        source_ids: &[String],
        mode: Mode,
        toggles: Toggles,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Self {
        let source = mode
            .uses_source()
            .then(|| Stream::new(source_ids.to_vec(), derive_rng(seed, RngStream::SourceOrder, epoch)));
        let labeled = mode.uses_target_labels().then(|| {
            Stream::new(
                pool.labeled.iter().cloned().collect(),
                derive_rng(seed, RngStream::LabeledOrder, epoch),
            )
        });
        let unlabeled = toggles.use_semi.then(|| {
            Stream::new(
                pool.unlabeled.iter().cloned().collect(),
                derive_rng(seed, RngStream::UnlabeledOrder, epoch),
            )
        });
        let steps = if !pool.unlabeled.is_empty() {
            pool.unlabeled.len().div_ceil(batch_size)
        } else {
            [&source, &labeled, &unlabeled]
                .into_iter()
                .flatten()
                .map(|s| s.len().div_ceil(batch_size))
                .max()
                .unwrap_or(0)
        };
        BatchAssembler {
            source,
            labeled,
            unlabeled,
            batch_size,
            steps,
            done: 0,
        }
    }
}

impl Iterator for BatchAssembler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.done == self.steps {
            return None;
        }
        self.done += 1;
        let b = self.batch_size;
        let take = |s: &mut Option<Stream>| s.as_mut().map(|s| s.next_batch(b)).unwrap_or_default();
        Some(Batch {
            source: take(&mut self.source),
            labeled: take(&mut self.labeled),
            unlabeled: take(&mut self.unlabeled),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pools::init_pool;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:04}")).collect()
    }

    #[test]
    fn small_labeled_pool_repeats_within_a_step() {
        let pool = init_pool(&ids("t", 200), 0.01, 0).unwrap();
        let mut a = BatchAssembler::new(&pool, &ids("s", 200), Mode::SsAda, Toggles::all(), 4, 0, 1);
        assert_eq!(a.steps, 50);
        let b = a.next().unwrap();
        assert_eq!(b.labeled.len(), 4);
        let distinct: std::collections::BTreeSet<_> = b.labeled.iter().collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(b.source.len(), 4);
        assert_eq!(b.unlabeled.len(), 4);
        assert_eq!(a.count(), 49);
    }

    #[test]
    fn mode_streams() {
        let pool = init_pool(&ids("t", 20), 0.1, 0).unwrap();
        let sup = BatchAssembler::new(&pool, &ids("s", 20), Mode::SupervisedTarget, Toggles::none(), 4, 0, 1)
            .next()
            .unwrap();
        assert!(sup.source.is_empty() && sup.unlabeled.is_empty() && !sup.labeled.is_empty());
        let src = BatchAssembler::new(&pool, &ids("s", 20), Mode::SourceOnly, Toggles::none(), 4, 0, 1)
            .next()
            .unwrap();
        assert!(src.labeled.is_empty() && src.unlabeled.is_empty() && !src.source.is_empty());
    }

    #[test]
    fn unlabeled_pass_covers_pool_once() {
        let pool = init_pool(&ids("t", 22), 0.0, 0).unwrap();
        let a = BatchAssembler::new(&pool, &[], Mode::SsAda, Toggles::all(), 4, 5, 3);
        assert_eq!(a.steps, 6);
        let seen: Vec<String> = a.flat_map(|b| b.unlabeled).collect();
        let first: std::collections::BTreeSet<_> = seen[..22].iter().collect();
        assert_eq!(first.len(), 22);
    }

    #[test]
    fn empty_unlabeled_falls_back_to_labeled_pacing() {
        let pool = init_pool(&ids("t", 10), 1.0, 0).unwrap();
        let a = BatchAssembler::new(&pool, &ids("s", 6), Mode::SsAda, Toggles::all(), 4, 0, 1);
        assert_eq!(a.steps, 3);
        assert!(a.clone().all(|b| b.unlabeled.is_empty()));
    }

    #[test]
    fn order_is_reproducible() {
        let pool = init_pool(&ids("t", 30), 0.1, 2).unwrap();
        let run = |epoch| {
            BatchAssembler::new(&pool, &ids("s", 30), Mode::SsAda, Toggles::all(), 4, 9, epoch).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }
}
