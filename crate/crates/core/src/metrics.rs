//! Confusion matrices and the agreement scores reported per fold.

use crate::error::{Error, Result};

/// `counts[t][p]` = number of items with true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sums (true-class counts).
    pub fn support(&self) -> Vec<u64> {
        (0..self.k)
            .map(|t| (0..self.k).map(|p| self.get(t, p)).sum())
            .collect()
    }

    /// Column sums (predicted-class counts).
    pub fn predicted(&self) -> Vec<u64> {
        (0..self.k)
            .map(|p| (0..self.k).map(|t| self.get(t, p)).sum())
            .collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Contract(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Contract(format!(
            "need equal non-empty label lists, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Contract(format!(
                "pair {i} = ({t}, {p}) outside 0..{k}"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

/// `2TP / (2TP + FP + FN)` per class. `None` for classes with no true
/// instances; 0 when the class is present but never hit.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let support = cm.support();
    let predicted = cm.predicted();
    (0..cm.k())
        .map(|c| {
            if support[c] == 0 {
                return None;
            }
            let tp = cm.get(c, c);
            let fp = predicted[c] - tp;
            let fn_ = support[c] - tp;
            let denom = 2 * tp + fp + fn_;
            Some(if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            })
        })
        .collect()
}

/// Support-weighted mean of the per-class F1. Absent classes weigh 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    let support = cm.support();
    per_class_f1(cm)
        .iter()
        .zip(&support)
        .map(|(f1, &s)| f1.unwrap_or(0.0) * s as f64 / total as f64)
        .sum()
}

/// Unweighted Cohen's κ. A single-cell matrix (p_e = p_o = 1) scores 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let p_o = cm.trace() as f64 / total;
    let p_e: f64 = cm
        .support()
        .iter()
        .zip(cm.predicted())
        .map(|(&r, c)| (r as f64 / total) * (c as f64 / total))
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return if p_o == 1.0 { 1.0 } else { 0.0 };
    }
    (p_o - p_e) / (1.0 - p_e)
}

/// Mean and sample (n − 1) standard deviation.
pub fn fold_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "fold summary needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// `0.788±0.062` style cell.
pub fn format_mean_std((mean, std): (f64, f64)) -> String {
    format!("{mean:.3}±{std:.3}")
}
