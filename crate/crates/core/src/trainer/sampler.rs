//! P classes x K instances batch sampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{CgdError, Result};

/// Indices of a P x K batch: `k` instances from each of `p` distinct classes.
///
/// Instances are drawn without replacement when a class has at least `k`
/// members and with replacement otherwise. Classes appear in the order they
/// were drawn, each as a run of `k` indices.
pub fn pk_sample<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(CgdError::InvalidArgument(format!("P and K must be positive, got P={p} K={k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    if classes.len() < p {
        return Err(CgdError::Data(format!(
            "PK sampling needs {p} classes, dataset has {}",
            classes.len()
        )));
    }
    let mut batch = Vec::with_capacity(p * k);
    for ci in sample(rng, classes.len(), p) {
        let members = classes[ci];
        if members.len() >= k {
            batch.extend(sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            batch.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(batch)
}
