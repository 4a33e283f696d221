use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Draws `n_draws` indices with replacement, each index weighted by the
/// inverse frequency of its label, so every class is drawn equally often in
/// expectation.
pub fn weighted_sample_indices(labels: &[usize], n_draws: usize, seed: u64) -> Vec<usize> {
    if labels.is_empty() {
        return Vec::new();
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let weights = labels.iter().map(|l| 1.0 / counts[l] as f64);
    let dist = WeightedIndex::new(weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_draws).map(|_| dist.sample(&mut rng)).collect()
}
