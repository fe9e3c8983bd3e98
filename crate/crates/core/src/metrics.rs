//! Evaluation metrics and the logistic-regression reference classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IrregularSeries;

/// Area under the ROC curve via the rank-sum statistic; tied scores count
/// one half. `None` when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(probabilities: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let hits = probabilities.iter().zip(labels).filter(|(p, l)| (**p > threshold) == **l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// L2-regularized logistic regression on standardized inputs, fitted by
/// full-batch gradient descent from zero (deterministic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[bool], l2: f64, iterations: usize) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::contract("logistic regression needs matching, non-empty inputs"));
        }
        let d = x[0].len();
        let means: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let stds: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - means[j]) / stds[j]).collect()).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let lr = 0.5;
        for _ in 0..iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let p = crate::autodiff::sigmoid(b + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
                let e = p - if label { 1.0 } else { 0.0 };
                for j in 0..d {
                    gw[j] += e * row[j];
                }
                gb += e;
            }
            for j in 0..d {
                w[j] -= lr * (gw[j] / n as f64 + l2 * w[j]);
            }
            b -= lr * gb / n as f64;
        }
        Ok(LogisticRegression { means, stds, weights: w, bias: b })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().enumerate().map(|(j, v)| (v - self.means[j]) / self.stds[j] * self.weights[j]).sum();
        crate::autodiff::sigmoid(self.bias + s)
    }
}

/// Per feature: mean, min, max and last observed value, plus the share of
/// rows where it was observed. Missing features contribute zeros.
pub fn summary_features(series: &IrregularSeries) -> Vec<f64> {
    let mut out = Vec::with_capacity(5 * series.n_features());
    for j in 0..series.n_features() {
        let vals: Vec<f64> = (0..series.len()).filter(|&r| series.mask[r][j]).map(|r| series.values[r][j]).collect();
        if vals.is_empty() {
            out.extend([0.0; 5]);
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, min, max, *vals.last().unwrap(), vals.len() as f64 / series.len() as f64]);
    }
    out
}
