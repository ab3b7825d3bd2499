use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Endless index stream over `0..len`, reshuffled at every epoch boundary.
#[derive(Debug, Clone)]
pub struct CyclicStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicStream {
    pub fn new(len: usize, seed: u64, tag: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot stream an empty dataset"));
        }
        Ok(CyclicStream {
            order: (0..len).collect(),
            pos: len,
            rng: rng_for(seed, tag),
        })
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Yields one `(strong, weak)` index pair per training step. Each side cycles
/// independently with its own seeded generator.
#[derive(Debug, Clone)]
pub struct DualStream {
    strong: CyclicStream,
    weak: CyclicStream,
}

const STRONG_TAG: u64 = 0x5354_524f_4e47;
const WEAK_TAG: u64 = 0x5745_414b;

impl DualStream {
    pub fn new(strong_len: usize, weak_len: usize, seed: u64) -> Result<Self> {
        Ok(DualStream {
            strong: CyclicStream::new(strong_len, seed, STRONG_TAG)?,
            weak: CyclicStream::new(weak_len, seed, WEAK_TAG)?,
        })
    }

    /// Discards the first `steps` pairs; used to resume mid-run.
    pub fn skip_steps(&mut self, steps: usize) {
        for _ in 0..steps {
            self.next();
        }
    }
}

impl Iterator for DualStream {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        Some((self.strong.next_index(), self.weak.next_index()))
    }
}

/// Sample-level view of [`DualStream`] over two manifests.
pub fn dual_stream<'a>(
    strong: &'a DatasetManifest,
    weak: &'a DatasetManifest,
    seed: u64,
) -> Result<impl Iterator<Item = (&'a Sample, &'a Sample)> + 'a> {
    let stream = DualStream::new(strong.len(), weak.len(), seed)?;
    Ok(stream.map(move |(s, w)| (&strong.samples()[s], &weak.samples()[w])))
}
