//! Prevalence-respecting batch sampler.
//!
//! Each epoch is partitioned into `ceil(N / batch_size)` batches whose sizes differ
//! by at most one. Samples are placed by iterative stratification over the joint
//! attribute set (every disease class plus every domain): the attribute with the
//! fewest unplaced positives is handled first, and each of its samples goes to the
//! batch still owing the most of that attribute relative to its share of the
//! global counts. Ties fall back to the batch owing the most over all of the
//! sample's attributes, then to the batch with most free slots.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

pub const MIN_BATCH_SIZE: usize = 4;

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Batches of sample indices for one epoch.
pub fn epoch_batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < MIN_BATCH_SIZE {
        return Err(Error::contract(format!(
            "batch size must be at least {MIN_BATCH_SIZE}, got {batch_size}"
        )));
    }
    let present = dataset.domain_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::contract(format!(
            "the sampler needs samples from at least 2 domains, found {present}"
        )));
    }
    let n = dataset.len();
    let n_batches = n.div_ceil(batch_size);
    let mut rng = epoch_rng(seed, epoch);

    let n_c = dataset.n_classes();
    let n_attr = n_c + dataset.n_domains();
    let attrs: Vec<Vec<usize>> = dataset
        .samples
        .iter()
        .map(|s| {
            let mut a: Vec<usize> = (0..n_c).filter(|&c| s.disease_labels[c] == 1).collect();
            a.push(n_c + s.domain_label);
            a
        })
        .collect();

    let mut capacity: Vec<usize> = (0..n_batches)
        .map(|b| n / n_batches + usize::from(b < n % n_batches))
        .collect();
    capacity.shuffle(&mut rng);

    let mut totals = vec![0usize; n_attr];
    for a in attrs.iter().flatten() {
        totals[*a] += 1;
    }
    let mut demand: Vec<Vec<f64>> = capacity
        .iter()
        .map(|&cap| totals.iter().map(|&t| t as f64 * cap as f64 / n as f64).collect())
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut placed = vec![false; n];
    let mut remaining = totals.clone();
    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];

    let mut left = n;
    while left > 0 {
        let Some(attr) = (0..n_attr)
            .filter(|&a| remaining[a] > 0)
            .min_by_key(|&a| (remaining[a], a))
        else {
            break;
        };
        for &i in &order {
            if placed[i] || !attrs[i].contains(&attr) {
                continue;
            }
            let b = best_batch(&demand, &capacity, attr, &attrs[i]);
            batches[b].push(i);
            capacity[b] -= 1;
            placed[i] = true;
            left -= 1;
            for &a in &attrs[i] {
                demand[b][a] -= 1.0;
                remaining[a] -= 1;
            }
        }
    }

    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

fn best_batch(demand: &[Vec<f64>], capacity: &[usize], attr: usize, sample_attrs: &[usize]) -> usize {
    let key = |b: usize| {
        let owed: f64 = sample_attrs.iter().map(|&a| demand[b][a]).sum();
        (demand[b][attr], owed, capacity[b])
    };
    let mut best: Option<usize> = None;
    for b in (0..capacity.len()).filter(|&b| capacity[b] > 0) {
        best = match best {
            None => Some(b),
            Some(cur) => {
                let (d, o, c) = key(b);
                let (dc, oc, cc) = key(cur);
                let better = d > dc || (d == dc && (o > oc || (o == oc && c > cc)));
                Some(if better { b } else { cur })
            }
        };
    }
    best.expect("total capacity equals the number of unplaced samples")
}

/// Endless stream of batches, epoch after epoch, in a deterministic order.
#[derive(Debug)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        loop {
            if let Some(b) = self.pending.next() {
                return Some(b);
            }
            if self.dataset.is_empty() {
                return None;
            }
            self.epoch += 1;
            self.pending = epoch_batches(self.dataset, self.batch_size, self.seed, self.epoch)
                .ok()?
                .into_iter();
        }
    }
}

/// Validates the sampler preconditions and returns the batch stream starting at
/// epoch 0.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    let first = epoch_batches(dataset, batch_size, seed, 0)?;
    Ok(BatchStream {
        dataset,
        batch_size,
        seed,
        epoch: 0,
        pending: first.into_iter(),
    })
}
