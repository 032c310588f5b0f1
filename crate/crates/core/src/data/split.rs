//! Train/test splits and seeded minibatch schedules.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::Dataset;
use crate::error::{Error, Result};

/// Splits into `(train, test)` with `train_fraction` of the records (or of
/// the identities, when `by_identity`). The two fractions must sum to one.
pub fn split(dataset: &Dataset, fractions: (f64, f64), seed: u64, by_identity: bool) -> Result<(Dataset, Dataset)> {
    let (train_frac, test_frac) = fractions;
    if !(train_frac >= 0.0 && test_frac >= 0.0 && ((train_frac + test_frac) - 1.0).abs() < 1e-9) {
        return Err(Error::invalid(format!(
            "split fractions must be non-negative and sum to 1, got ({train_frac}, {test_frac})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if by_identity {
        let ids = identity_set(dataset)?;
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.shuffle(&mut rng);
        let n_train = (train_frac * ids.len() as f64).round() as usize;
        if ids.len() < 2 || n_train == 0 || n_train == ids.len() {
            return Err(Error::invalid(format!(
                "cannot split {} identities into non-empty sides with fraction {train_frac}",
                ids.len()
            )));
        }
        let train_ids: BTreeSet<u32> = ids[..n_train].iter().copied().collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, r) in dataset.records().iter().enumerate() {
            if train_ids.contains(&r.identity_id.expect("checked by identity_set")) {
                train.push(i);
            } else {
                test.push(i);
            }
        }
        Ok((dataset.subset(&train), dataset.subset(&test)))
    } else {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = (train_frac * idx.len() as f64).round() as usize;
        let (train, test) = idx.split_at(n_train);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((dataset.subset(&train), dataset.subset(&test)))
    }
}

/// Fold `fold` of a seeded `k`-way partition: that fold is the test side.
pub fn kfold(dataset: &Dataset, k: usize, fold: usize, seed: u64, by_identity: bool) -> Result<(Dataset, Dataset)> {
    if k < 2 || fold >= k {
        return Err(Error::invalid(format!(
            "k-fold needs k >= 2 and fold < k, got k={k}, fold={fold}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fold_of: Box<dyn Fn(usize) -> usize> = if by_identity {
        let mut ids: Vec<u32> = identity_set(dataset)?.into_iter().collect();
        if ids.len() < k {
            return Err(Error::invalid(format!(
                "{} identities cannot fill {k} folds",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let rank: std::collections::BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i % k)).collect();
        let recs = dataset.records().to_vec();
        Box::new(move |i| rank[&recs[i].identity_id.expect("checked")])
    } else {
        if dataset.len() < k {
            return Err(Error::invalid(format!(
                "{} records cannot fill {k} folds",
                dataset.len()
            )));
        }
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let mut fold_of = vec![0; dataset.len()];
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % k;
        }
        Box::new(move |i| fold_of[i])
    };
    let (test, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| fold_of(i) == fold);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

fn identity_set(dataset: &Dataset) -> Result<BTreeSet<u32>> {
    dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.identity_id
                .ok_or_else(|| Error::invalid(format!("record {i} has no identity id; identity split impossible")))
        })
        .collect()
}

/// Shuffled minibatches of record indices for one epoch. The permutation is
/// a function of `(seed, epoch)`; a trailing batch smaller than two (too
/// small for batch normalization) is dropped.
pub fn batches(n_records: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n_records).collect();
    idx.shuffle(&mut rng);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
