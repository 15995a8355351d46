use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::LabeledSample;

/// Downsamples NA samples to `floor(mean count)` over the non-NA relations
/// that have at least one sample. Non-NA samples are all kept; the relative
/// order of the survivors is unchanged. With no non-NA samples every NA sample
/// is dropped.
pub fn balance_na<R: Rng + ?Sized>(samples: &[LabeledSample], na_label: &str, rng: &mut R) -> Vec<LabeledSample> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut na_positions = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.relation == na_label {
            na_positions.push(i);
        } else {
            *counts.entry(s.relation.as_str()).or_default() += 1;
        }
    }
    let m = if counts.is_empty() {
        0
    } else {
        counts.values().sum::<usize>() / counts.len()
    };
    let keep_n = m.min(na_positions.len());
    let mut keep = vec![false; samples.len()];
    for j in index::sample(rng, na_positions.len(), keep_n) {
        keep[na_positions[j]] = true;
    }
    samples
        .iter()
        .enumerate()
        .filter(|(i, s)| s.relation != na_label || keep[*i])
        .map(|(_, s)| s.clone())
        .collect()
}
