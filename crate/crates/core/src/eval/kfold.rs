use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, TAG_FOLDS};

/// Stratified `k`-fold split at the clip level.
///
/// Each class is shuffled independently, then benign and malignant indices
/// are dealt round-robin over the folds with a single pointer that carries
/// across classes. Folds come back sorted.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::contract(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::contract(format!("{} clips cannot fill {k} folds", labels.len())));
    }
    let mut rng = stream(seed, &[TAG_FOLDS]);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if !idx.is_empty() && idx.len() < k {
            warn!("class {class} has {} clips for {k} folds; some test folds will be single-class", idx.len());
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("labels must be 0 or 1, found {l}")));
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// FNV-1a over the clip ids of each fold, used to show that two reports
/// share a split.
pub fn split_hash<S: AsRef<str>>(folds: &[Vec<S>]) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for (i, f) in folds.iter().enumerate() {
        feed(format!("fold{i}:").as_bytes());
        for id in f {
            feed(id.as_ref().as_bytes());
            feed(b",");
        }
        feed(b";");
    }
    format!("{h:016x}")
}
