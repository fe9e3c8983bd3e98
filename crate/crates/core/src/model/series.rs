use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature normalization statistics in raw units, plus the length of the
/// observation window that maps onto normalized time `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub window_hours: f64,
}

impl NormStats {
    /// Mean 0 / std 1 for every feature: values are taken as-is.
    pub fn identity(feature_names: Vec<String>, window_hours: f64) -> Self {
        let n = feature_names.len();
        NormStats { feature_names, means: vec![0.0; n], stds: vec![1.0; n], window_hours }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Population mean and standard deviation of the observed raw values.
    pub fn fit(series: &[IrregularSeries]) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::contract("cannot fit normalization on no series"))?;
        let f = first.n_features();
        let mut sum = vec![0.0; f];
        let mut count = vec![0usize; f];
        for s in series {
            for (r, row) in s.mask.iter().enumerate() {
                for (j, &m) in row.iter().enumerate() {
                    if m {
                        sum[j] += s.raw_value(r, j);
                        count[j] += 1;
                    }
                }
            }
        }
        let means: Vec<f64> = (0..f).map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 }).collect();
        let mut ss = vec![0.0; f];
        for s in series {
            for (r, row) in s.mask.iter().enumerate() {
                for (j, &m) in row.iter().enumerate() {
                    if m {
                        ss[j] += (s.raw_value(r, j) - means[j]).powi(2);
                    }
                }
            }
        }
        let stds = (0..f)
            .map(|j| {
                let sd = if count[j] > 0 { (ss[j] / count[j] as f64).sqrt() } else { 1.0 };
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats {
            feature_names: first.feature_names.clone(),
            means,
            stds,
            window_hours: first.norm_stats.window_hours,
        })
    }

    pub fn to_raw(&self, feature: usize, normalized: f64) -> f64 {
        normalized * self.stds[feature] + self.means[feature]
    }

    pub fn to_normalized(&self, feature: usize, raw: f64) -> f64 {
        (raw - self.means[feature]) / self.stds[feature]
    }
}

/// Timestamped, masked multivariate observations.
///
/// `times` are in window units (`[0, 1]` is the observation window), values
/// are z-scored with `norm_stats`. Entries with `mask == false` carry no
/// information and are never read by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub feature_names: Vec<String>,
    pub label: Option<bool>,
    pub norm_stats: NormStats,
}

impl IrregularSeries {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }

    pub fn raw_value(&self, row: usize, feature: usize) -> f64 {
        self.norm_stats.to_raw(feature, self.values[row][feature])
    }

    /// Rows with at least one observed entry at or before `until`.
    pub fn observed_rows(&self, until: f64) -> Vec<usize> {
        (0..self.times.len())
            .filter(|&r| self.times[r] <= until + 1e-12 && self.mask[r].iter().any(|m| *m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_names.len();
        if f == 0 {
            return Err(Error::validation("feature_names", "at least one feature is required"));
        }
        if self.values.len() != self.times.len() {
            return Err(Error::validation(
                "values",
                format!("{} rows for {} timestamps", self.values.len(), self.times.len()),
            ));
        }
        if self.mask.len() != self.times.len() {
            return Err(Error::validation("mask", format!("{} rows for {} timestamps", self.mask.len(), self.times.len())));
        }
        for (r, (vals, mask)) in self.values.iter().zip(&self.mask).enumerate() {
            if vals.len() != f {
                return Err(Error::validation(format!("values[{}]", r), format!("expected {} columns, got {}", f, vals.len())));
            }
            if mask.len() != f {
                return Err(Error::validation(format!("mask[{}]", r), format!("expected {} columns, got {}", f, mask.len())));
            }
            for j in 0..f {
                if mask[j] && !vals[j].is_finite() {
                    return Err(Error::validation(format!("values[{}][{}]", r, j), "observed value is not finite"));
                }
            }
        }
        if let Some(t) = self.times.iter().find(|t| !t.is_finite()) {
            return Err(Error::validation("times", format!("non-finite timestamp {}", t)));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("times", "times not increasing"));
        }
        if self.times.first().is_some_and(|t| *t < 0.0) {
            return Err(Error::validation("times", "times must be non-negative"));
        }
        if !self.mask.iter().flatten().any(|m| *m) {
            return Err(Error::validation("mask", "at least one entry must be observed"));
        }
        let ns = &self.norm_stats;
        if ns.means.len() != f || ns.stds.len() != f || ns.feature_names.len() != f {
            return Err(Error::validation("norm_stats", format!("expected statistics for {} features", f)));
        }
        if ns.stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || ns.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation("norm_stats", "standard deviations must be positive and finite"));
        }
        if !(ns.window_hours > 0.0) {
            return Err(Error::validation("norm_stats.window_hours", "window length must be positive"));
        }
        Ok(())
    }

    /// Re-expresses the series under different normalization statistics.
    pub fn renormalized(&self, stats: &NormStats) -> Result<Self> {
        if stats.feature_names != self.feature_names {
            return Err(Error::validation(
                "feature_names",
                format!("expected {:?}, got {:?}", stats.feature_names, self.feature_names),
            ));
        }
        let mut out = self.clone();
        for (r, row) in out.values.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.mask[r][j] { stats.to_normalized(j, self.raw_value(r, j)) } else { 0.0 };
            }
        }
        out.norm_stats = stats.clone();
        Ok(out)
    }

    /// Values with unobserved cells replaced by zero.
    pub fn masked_row(&self, row: usize) -> Vec<f64> {
        self.values[row].iter().zip(&self.mask[row]).map(|(v, m)| if *m { *v } else { 0.0 }).collect()
    }

    pub fn to_document(&self) -> SeriesDocument {
        SeriesDocument {
            id: self.id.clone(),
            times: self.times.clone(),
            values: self
                .values
                .iter()
                .zip(&self.mask)
                .map(|(row, m)| row.iter().zip(m).map(|(v, m)| if *m { Some(*v) } else { None }).collect())
                .collect(),
            feature_names: self.feature_names.clone(),
            label: self.label,
            norm_stats: self.norm_stats.clone(),
        }
    }
}

/// Wire form of a series. Unobserved cells are `null`, so the mask is
/// implied by the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDocument {
    #[serde(default)]
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub label: Option<bool>,
    pub norm_stats: NormStats,
}

impl SeriesDocument {
    pub fn into_series(self) -> Result<IrregularSeries> {
        let mask = self.values.iter().map(|row| row.iter().map(|v| v.is_some()).collect()).collect();
        let values = self.values.iter().map(|row| row.iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
        let series = IrregularSeries {
            id: self.id,
            times: self.times,
            values,
            mask,
            feature_names: self.feature_names,
            label: self.label,
            norm_stats: self.norm_stats,
        };
        series.validate()?;
        Ok(series)
    }
}
