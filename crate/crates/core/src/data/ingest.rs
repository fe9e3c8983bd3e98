//! Reading and writing series collections.
//!
//! Tabular format: UTF-8 CSV with the header
//!
//! ```text
//! series_id,time_hours,feature,value
//! ```
//!
//! one observation per row, `time_hours` measured from the start of the
//! observation window. The reserved feature name `outcome` carries the
//! binary label (`0` or `1`, `time_hours` may be empty). Rows may come in
//! any order; series are emitted sorted by id.
//!
//! Structured format: a JSON array of series documents (normalized values,
//! `null` for unobserved cells, normalization statistics inline). It is the
//! exact interchange form; CSV holds raw values and round-trips only to
//! floating-point rounding of the normalization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IrregularSeries, NormStats, SeriesDocument};

pub const CSV_HEADER: [&str; 4] = ["series_id", "time_hours", "feature", "value"];
pub const OUTCOME_FEATURE: &str = "outcome";

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub window_hours: f64,
    /// Normalize with these statistics (and feature order) instead of
    /// fitting them on the file.
    pub stats: Option<NormStats>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { window_hours: 48.0, stats: None }
    }
}

/// Non-fatal findings, e.g. repeated measurements that were averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub line: u64,
    pub series_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub series: Vec<IrregularSeries>,
    pub warnings: Vec<IngestWarning>,
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line: line as usize, message: message.into() }
}

#[derive(Default)]
struct Pending {
    /// time bits → feature → (sum, count, first line)
    cells: BTreeMap<u64, BTreeMap<String, (f64, usize, u64)>>,
    times: BTreeMap<u64, f64>,
    label: Option<bool>,
}

/// Parses the tabular format.
pub fn ingest_csv(text: &str, opts: &IngestOptions) -> Result<Ingested> {
    if text.trim().is_empty() {
        return Ok(Ingested { series: vec![], warnings: vec![] });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    if !(opts.window_hours > 0.0) {
        return Err(Error::validation("window_hours", "window length must be positive"));
    }

    let mut pending: BTreeMap<String, Pending> = BTreeMap::new();
    let mut features: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty series_id"));
        }
        let feature = record[2].to_string();
        let value: f64 = record[3].parse().map_err(|_| parse_err(line, format!("value {:?} is not a number", &record[3])))?;
        let entry = pending.entry(id.clone()).or_default();
        if feature == OUTCOME_FEATURE {
            entry.label = Some(match value {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                _ => return Err(parse_err(line, "outcome must be 0 or 1")),
            });
            continue;
        }
        if feature.is_empty() {
            return Err(parse_err(line, "empty feature name"));
        }
        let hours: f64 =
            record[1].parse().map_err(|_| parse_err(line, format!("time {:?} is not a number", &record[1])))?;
        if !hours.is_finite() || hours < 0.0 {
            return Err(parse_err(line, "time must be finite and non-negative"));
        }
        if !value.is_finite() {
            return Err(parse_err(line, "value must be finite"));
        }
        match &opts.stats {
            Some(stats) if !stats.feature_names.contains(&feature) => {
                return Err(parse_err(line, format!("unknown feature {:?}", feature)));
            }
            None if !features.contains(&feature) => features.push(feature.clone()),
            _ => {}
        }
        let t = hours / opts.window_hours;
        let key = t.to_bits();
        entry.times.insert(key, t);
        let cell = entry.cells.entry(key).or_default().entry(feature).or_insert((0.0, 0, line));
        cell.0 += value;
        cell.1 += 1;
    }

    let feature_names = match &opts.stats {
        Some(s) => s.feature_names.clone(),
        None => {
            features.sort();
            features
        }
    };
    let mut warnings = Vec::new();
    let mut raw = Vec::with_capacity(pending.len());
    for (id, p) in pending {
        if p.times.is_empty() {
            return Err(Error::validation("series", format!("series {} has no observations", id)));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for (key, t) in &p.times {
            let cells = &p.cells[key];
            let mut row = vec![0.0; feature_names.len()];
            let mut m = vec![false; feature_names.len()];
            for (j, name) in feature_names.iter().enumerate() {
                if let Some(&(sum, count, line)) = cells.get(name) {
                    if count > 1 {
                        warnings.push(IngestWarning {
                            line,
                            series_id: id.clone(),
                            message: format!("{} values of {} at the same time averaged", count, name),
                        });
                    }
                    row[j] = sum / count as f64;
                    m[j] = true;
                }
            }
            times.push(*t);
            values.push(row);
            mask.push(m);
        }
        raw.push(IrregularSeries {
            id,
            times,
            values,
            mask,
            feature_names: feature_names.clone(),
            label: p.label,
            norm_stats: NormStats::identity(feature_names.clone(), opts.window_hours),
        });
    }
    let stats = match &opts.stats {
        Some(s) => s.clone(),
        None if raw.is_empty() => return Ok(Ingested { series: raw, warnings }),
        None => NormStats::fit(&raw)?,
    };
    let series = raw.iter().map(|s| s.renormalized(&stats)).collect::<Result<Vec<_>>>()?;
    for s in &series {
        s.validate()?;
    }
    Ok(Ingested { series, warnings })
}

/// Writes the tabular format in raw units.
pub fn export_csv(series: &[IrregularSeries]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for s in series {
        for (r, t) in s.times.iter().enumerate() {
            let hours = t * s.norm_stats.window_hours;
            for (j, name) in s.feature_names.iter().enumerate() {
                if s.mask[r][j] {
                    w.write_record([s.id.as_str(), &hours.to_string(), name, &s.raw_value(r, j).to_string()])
                        .map_err(io)?;
                }
            }
        }
        if let Some(label) = s.label {
            w.write_record([s.id.as_str(), "", OUTCOME_FEATURE, if label { "1" } else { "0" }]).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

pub fn ingest_json(text: &str) -> Result<Vec<IrregularSeries>> {
    if text.trim().is_empty() {
        return Ok(vec![]);
    }
    let docs: Vec<SeriesDocument> = serde_json::from_str(text).map_err(|e| parse_err(e.line() as u64, e.to_string()))?;
    docs.into_iter().map(SeriesDocument::into_series).collect()
}

pub fn export_json(series: &[IrregularSeries]) -> String {
    let docs: Vec<SeriesDocument> = series.iter().map(|s| s.to_document()).collect();
    serde_json::to_string_pretty(&docs).expect("documents serialize")
}

/// Reads either format, chosen by extension (`.json` is structured,
/// anything else tabular).
pub fn ingest_file(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut series = ingest_json(&text)?;
        if let Some(stats) = &opts.stats {
            series = series.iter().map(|s| s.renormalized(stats)).collect::<Result<_>>()?;
        }
        Ok(Ingested { series, warnings: vec![] })
    } else {
        ingest_csv(&text, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_icu, IcuGenConfig};

    #[test]
    fn empty_file_is_an_empty_collection() {
        assert!(ingest_csv("", &IngestOptions::default()).unwrap().series.is_empty());
        let header_only = "series_id,time_hours,feature,value\n";
        assert!(ingest_csv(header_only, &IngestOptions::default()).unwrap().series.is_empty());
        assert!(ingest_json("").unwrap().is_empty());
    }

    #[test]
    fn one_row_one_observation() {
        let text = "series_id,time_hours,feature,value\np1,12,HR,90\n";
        let got = ingest_csv(text, &IngestOptions::default()).unwrap();
        assert_eq!(got.series.len(), 1);
        let s = &got.series[0];
        assert_eq!(s.times, vec![0.25]);
        assert_eq!(s.mask, vec![vec![true]]);
        assert_eq!(s.raw_value(0, 0), 90.0);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = "series_id,time_hours,feature,value\np1,1,HR,90\np1,2,HR,abc\n";
        match ingest_csv(text, &IngestOptions::default()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("{:?}", other),
        }
        let bad_header = "id,t,f,v\n";
        assert!(matches!(ingest_csv(bad_header, &IngestOptions::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicates_are_averaged_with_a_warning() {
        let text = "series_id,time_hours,feature,value\np1,4,HR,80\np1,4,HR,100\np1,2,HR,70\np1,,outcome,1\n";
        let got = ingest_csv(text, &IngestOptions::default()).unwrap();
        let s = &got.series[0];
        assert_eq!(s.len(), 2);
        assert!((s.raw_value(1, 0) - 90.0).abs() < 1e-12);
        assert_eq!(s.label, Some(true));
        assert_eq!(got.warnings.len(), 1);
        assert_eq!(got.warnings[0].line, 2);
    }

    #[test]
    fn structured_round_trip_is_exact() {
        let cfg = IcuGenConfig { n_patients: 12, ..IcuGenConfig::default() };
        let csv = export_csv(&gen_icu(&cfg).unwrap()).unwrap();
        let first = ingest_csv(&csv, &IngestOptions::default()).unwrap().series;
        let again = ingest_json(&export_json(&first)).unwrap();
        assert_eq!(first, again);
        assert_eq!(export_json(&first), export_json(&again));
    }

    #[test]
    fn tabular_round_trip_is_tight() {
        let cfg = IcuGenConfig { n_patients: 12, ..IcuGenConfig::default() };
        let first = ingest_csv(&export_csv(&gen_icu(&cfg).unwrap()).unwrap(), &IngestOptions::default()).unwrap().series;
        let second = ingest_csv(&export_csv(&first).unwrap(), &IngestOptions::default()).unwrap().series;
        assert_eq!(first.len(), second.len());
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.label, b.label);
            for (x, y) in a.times.iter().zip(&b.times) {
                assert!((x - y).abs() < 1e-12);
            }
            for (r, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
                for j in 0..x.len() {
                    if a.mask[r][j] {
                        assert!((x[j] - y[j]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_stats_reject_unknown_features() {
        let stats = NormStats::identity(vec!["HR".into()], 48.0);
        let opts = IngestOptions { stats: Some(stats), ..IngestOptions::default() };
        assert!(ingest_csv("series_id,time_hours,feature,value\np,1,HR,1\n", &opts).is_ok());
        let err = ingest_csv("series_id,time_hours,feature,value\np,1,SpO2,1\n", &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
