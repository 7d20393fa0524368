//! Subject-independent k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Subjects per fold. Fold `k` is tested on `folds[k]` and trained on the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn test_subjects(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != fold)
            .flat_map(|(_, s)| s.iter().cloned())
            .collect()
    }

    /// Sample indices `(train, test)` of `fold` within `data`.
    pub fn indices(&self, data: &Dataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let test = &self.folds[fold];
        data.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, test.contains(&s.subject)))
            .fold((Vec::new(), Vec::new()), |(mut tr, mut te), (i, is_test)| {
                if is_test {
                    te.push(i);
                } else {
                    tr.push(i);
                }
                (tr, te)
            })
    }
}

/// Sorts and deduplicates `subjects`, shuffles them with `seed`, and deals them
/// round-robin into `k` groups whose sizes differ by at most one.
pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut ids: Vec<String> = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if k == 0 || ids.len() < k {
        return Err(Error::Config(format!(
            "cannot split {} subjects into {k} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit { folds })
}

/// Holds out `fraction` of `subjects` (at least one when two or more exist)
/// for model selection. Returns `(train, validation)`.
pub fn validation_split(subjects: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids = subjects.to_vec();
    ids.sort();
    if ids.len() < 2 || fraction <= 0.0 {
        return (ids, Vec::new());
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut val = ids.split_off(ids.len() - n_val);
    ids.sort();
    val.sort();
    (ids, val)
}
