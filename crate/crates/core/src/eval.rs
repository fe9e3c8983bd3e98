//! Point predictions and cohort metrics.
//!
//! Point predictions start from the posterior mean of `z0` with the noise
//! channel at its mean (zero).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{accuracy, auc, summary_features, LogisticRegression};
use crate::model::{classify_state, decode, encode, evolve, IrregularSeries, ModelParams, Reconstruction};
use crate::odeint::Tolerances;
use crate::training::FRACTIONS;

/// Decoded posterior-mean trajectory on `grid`, encoding the first
/// `fraction` of the window.
pub fn point_reconstruction(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    grid: &[f64],
    tol: Tolerances,
) -> Result<Reconstruction> {
    let post = encode(series, params, fraction)?;
    let noise = vec![0.0; params.arch.noise_dim];
    let path = evolve(&post.mean, &noise, grid, params, tol)?;
    Ok(decode(&path, params, fraction))
}

/// Outcome probability after seeing the first `fraction` of the window.
pub fn point_probability(series: &IrregularSeries, params: &ModelParams, fraction: f64, tol: Tolerances) -> Result<f64> {
    let post = encode(series, params, fraction)?;
    let noise = vec![0.0; params.arch.noise_dim];
    let path = evolve(&post.mean, &noise, &[fraction], params, tol)?;
    Ok(classify_state(&path.states[0], params))
}

/// Squared error summed over observed entries with time in `(from, to]`,
/// and the number of such entries.
pub fn reconstruction_sse(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    from: f64,
    to: f64,
    tol: Tolerances,
) -> Result<(f64, usize)> {
    let rows: Vec<usize> = (0..series.len())
        .filter(|&r| series.times[r] > from && series.times[r] <= to && series.mask[r].iter().any(|m| *m))
        .collect();
    if rows.is_empty() {
        return Ok((0.0, 0));
    }
    let grid: Vec<f64> = rows.iter().map(|&r| series.times[r]).collect();
    let rec = point_reconstruction(series, params, fraction, &grid, tol)?;
    let (mut sse, mut n) = (0.0, 0);
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..series.n_features() {
            if series.mask[r][j] {
                sse += (rec.means[k][j] - series.values[r][j]).powi(2);
                n += 1;
            }
        }
    }
    Ok((sse, n))
}

/// Mean squared error pooled over every observed entry of `set` in
/// `(from, to]`.
pub fn cohort_mse(set: &[IrregularSeries], params: &ModelParams, fraction: f64, from: f64, to: f64, tol: Tolerances) -> Result<f64> {
    let (mut sse, mut n) = (0.0, 0);
    for s in set {
        let (a, b) = reconstruction_sse(s, params, fraction, from, to, tol)?;
        sse += a;
        n += b;
    }
    Ok(if n > 0 { sse / n as f64 } else { f64::NAN })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionMetrics {
    pub fraction: f64,
    /// Whole-window reconstruction error.
    pub mse: f64,
    /// Error on the final fifth of the window only.
    pub final_fifth_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub schema_version: u32,
    pub n_series: usize,
    pub per_fraction: Vec<FractionMetrics>,
    /// Classification at the full window.
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Per-fraction reconstruction errors and full-window classification.
pub fn evaluate(set: &[IrregularSeries], params: &ModelParams, tol: Tolerances) -> Result<EvalMetrics> {
    let mut per_fraction = Vec::new();
    for &f in &FRACTIONS {
        per_fraction.push(FractionMetrics {
            fraction: f,
            mse: cohort_mse(set, params, f, f64::NEG_INFINITY, f64::INFINITY, tol)?,
            final_fifth_mse: cohort_mse(set, params, f, 0.8, f64::INFINITY, tol)?,
        });
    }
    let labeled: Vec<&IrregularSeries> = set.iter().filter(|s| s.label.is_some()).collect();
    let probs = labeled.iter().map(|s| point_probability(s, params, 1.0, tol)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = labeled.iter().map(|s| s.label.unwrap()).collect();
    let auc = auc(&probs, &labels);
    let accuracy = (!labels.is_empty()).then(|| accuracy(&probs, &labels, 0.5));
    Ok(EvalMetrics { schema_version: METRICS_SCHEMA_VERSION, n_series: set.len(), per_fraction, auc, accuracy })
}

/// AUC of logistic regression on per-feature summary statistics, fitted on
/// `train` and scored on `test`.
pub fn summary_baseline_auc(train: &[IrregularSeries], test: &[IrregularSeries]) -> Result<Option<f64>> {
    let lab = |s: &[IrregularSeries]| -> (Vec<Vec<f64>>, Vec<bool>) {
        s.iter().filter_map(|s| s.label.map(|l| (summary_features(s), l))).unzip()
    };
    let (xtr, ytr) = lab(train);
    let (xte, yte) = lab(test);
    let model = LogisticRegression::fit(&xtr, &ytr, 1e-3, 2000)?;
    let p: Vec<f64> = xte.iter().map(|x| model.predict(x)).collect();
    Ok(auc(&p, &yte))
}

/// Accuracy of a logistic probe on posterior means (full window).
pub fn posterior_probe_accuracy(train: &[IrregularSeries], test: &[IrregularSeries], params: &ModelParams) -> Result<f64> {
    let feats = |set: &[IrregularSeries]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in set {
            if let Some(l) = s.label {
                x.push(encode(s, params, 1.0)?.mean);
                y.push(l);
            }
        }
        Ok((x, y))
    };
    let (xtr, ytr) = feats(train)?;
    let (xte, yte) = feats(test)?;
    let model = LogisticRegression::fit(&xtr, &ytr, 1e-3, 2000)?;
    let p: Vec<f64> = xte.iter().map(|x| model.predict(x)).collect();
    Ok(accuracy(&p, &yte, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_icu, normalize_with_train, split, IcuGenConfig};
    use crate::model::Architecture;

    #[test]
    fn zero_model_predicts_the_decoder_bias() {
        let p = ModelParams::zeros(&Architecture::new(2), 0.3);
        let s = crate::model::tiny_series();
        let rec = point_reconstruction(&s, &p, 1.0, &[0.0, 0.5, 2.0], Tolerances::SERVING).unwrap();
        assert!(rec.means.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(rec.observed_flag, vec![true, true, false]);
        assert_eq!(point_probability(&s, &p, 0.5, Tolerances::SERVING).unwrap(), 0.5);
        // hand-computed error of predicting zeros
        let (sse, n) = reconstruction_sse(&s, &p, 1.0, f64::NEG_INFINITY, f64::INFINITY, Tolerances::SERVING).unwrap();
        assert_eq!(n, 4);
        assert_eq!(sse, 1.0 + 0.25 + 1.0 + 4.0);
    }

    #[test]
    fn summary_baseline_certifies_the_generator() {
        let raw = gen_icu(&IcuGenConfig { n_patients: 400, seed: 11, ..IcuGenConfig::default() }).unwrap();
        let (train, test) = split(&raw, 0.2, 11).unwrap();
        let (_, train, others) = normalize_with_train(&train, &[&test]).unwrap();
        let a = summary_baseline_auc(&train, &others[0]).unwrap().unwrap();
        assert!(a >= 0.80, "baseline AUC {}", a);
    }
}
