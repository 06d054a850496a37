use crate::error::{Error, Result};
use crate::tensor::RngState;

/// Assignment of every trial to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} trials cannot fill {k} folds")));
    }
    Ok(())
}

/// Per-class shuffle, then round-robin dealing. Each class starts where the
/// previous one stopped so fold sizes stay within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    check_k(k, labels.len())?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = RngState::new(seed);
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {c} has {} trials, fewer than {k} folds",
                members.len()
            )));
        }
        rng.shuffle(members);
        for (j, &i) in members.iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(FoldSplit { assignment, k })
}

/// Unstratified split: one shuffle of all trials, dealt round-robin.
pub fn random_kfold(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    check_k(k, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut assignment = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        assignment[i] = j % k;
    }
    Ok(FoldSplit { assignment, k })
}
