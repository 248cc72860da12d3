use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{prepare_input, NgramFeaturizer, SparseFeatures};
use crate::error::{BelxError, Result};
use crate::ingest::PositiveGroup;

/// One optimizer step's worth of aliases, two per sampled group.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// `(alias, qid)` in shuffled order.
    pub items: Vec<(String, u64)>,
    pub labels: Vec<u64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn features(&self, featurizer: &NgramFeaturizer, max_chars: usize) -> Result<Vec<SparseFeatures>> {
        self.items
            .iter()
            .map(|(alias, _)| Ok(featurizer.features(prepare_input(alias, max_chars)?)))
            .collect()
    }
}

/// Splits a seeded permutation of the eligible groups into batches of
/// `batch_size / 2` groups; a trailing partial batch is dropped.
pub fn sample_batches(groups: &[PositiveGroup], batch_size: usize, seed: u64) -> Result<Vec<TrainingBatch>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(BelxError::Config(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let per_batch = batch_size / 2;
    let mut eligible: Vec<&PositiveGroup> = groups.iter().filter(|g| !g.is_single_alias()).collect();
    if eligible.len() < per_batch {
        return Err(BelxError::Config(format!(
            "batch size {batch_size} needs {per_batch} groups with at least two aliases, \
             found {} ({} short)",
            eligible.len(),
            per_batch - eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(eligible.len() / per_batch);
    for chunk in eligible.chunks_exact(per_batch) {
        let mut items = Vec::with_capacity(batch_size);
        for g in chunk {
            let n = g.members.len();
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            items.push((g.members[a].alias.clone(), g.qid));
            items.push((g.members[b].alias.clone(), g.qid));
        }
        items.shuffle(&mut rng);
        let labels = items.iter().map(|(_, q)| *q).collect();
        batches.push(TrainingBatch { items, labels });
    }
    Ok(batches)
}
