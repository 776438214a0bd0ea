//! Deterministic batch scheduling: length-sorted bucketing into fixed-size
//! batches, batch order shuffled per epoch under a derived seed, wrapping
//! with a reshuffle when a dataset is exhausted.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::seeding;

/// Batches of example indices for one epoch.
pub fn plan_epoch(
    dataset: &Dataset,
    batch_sentences: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    // bucket by length; ties resolved by id for stability
    order.sort_by(|&a, &b| {
        let ea = &dataset.examples[a];
        let eb = &dataset.examples[b];
        (ea.source_len() + ea.target_ids.len(), &ea.id)
            .cmp(&(eb.source_len() + eb.target_ids.len(), &eb.id))
    });
    let mut batches: Vec<Vec<usize>> =
        order.chunks(batch_sentences).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "epoch-shuffle", epoch));
    batches.shuffle(&mut rng);
    batches
}

/// Iterates one direction's dataset forever, one batch at a time.
pub struct DirectionFeed<'d> {
    dataset: &'d Dataset,
    pub name: String,
    batch_sentences: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    plan: Vec<Vec<usize>>,
}

impl<'d> DirectionFeed<'d> {
    pub fn new(dataset: &'d Dataset, name: String, batch_sentences: usize, seed: u64) -> Self {
        let plan = plan_epoch(dataset, batch_sentences, seed, 0);
        DirectionFeed { dataset, name, batch_sentences, seed, epoch: 0, cursor: 0, plan }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.dataset.is_empty() {
            return Err(Error::config(format!("direction {} has no examples", self.name)));
        }
        if self.cursor >= self.plan.len() {
            self.epoch += 1;
            self.plan = plan_epoch(self.dataset, self.batch_sentences, self.seed, self.epoch);
            self.cursor = 0;
        }
        let indices = &self.plan[self.cursor];
        self.cursor += 1;
        let examples: Vec<&crate::corpus::Example> =
            indices.iter().map(|&i| &self.dataset.examples[i]).collect();
        Batch::from_examples(&examples)
    }
}
