//! Confusion-matrix accounting, accuracy and Cohen's kappa.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[actual][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    n: u64,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
            n: 0,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        let n = counts.iter().flatten().sum();
        Ok(Self { counts, n })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let k = self.n_classes();
        if actual >= k || predicted >= k {
            return Err(Error::Index(format!(
                "class pair ({actual}, {predicted}) outside 0..{k}"
            )));
        }
        self.counts[actual][predicted] += 1;
        self.n += 1;
        Ok(())
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Actual class counts `a_i`.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Predicted class counts `b_i`.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.n_classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// CSV with one row per actual class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual");
        for j in 0..self.n_classes() {
            let _ = write!(s, ",pred_{j}");
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&p, &y) in preds.iter().zip(labels) {
        cm.add(y, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n == 0 {
        return Err(Error::Metric(
            "accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / cm.n as f64)
}

/// `(p0 - pe) / (1 - pe)` with `pe = sum(a_i b_i) / n^2`, evaluated as
/// `(n * trace - sum(a_i b_i)) / (n^2 - sum(a_i b_i))` in integers.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n == 0 {
        return Err(Error::Metric("kappa of an empty confusion matrix".into()));
    }
    let n = cm.n as i128;
    let chance: i128 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&a, b)| a as i128 * b as i128)
        .sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Err(Error::Metric(
            "kappa undefined: chance agreement p_e = 1".into(),
        ));
    }
    Ok((n * cm.trace() as i128 - chance) as f64 / denom as f64)
}
