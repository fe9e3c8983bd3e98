//! Synthetic cohorts, splitting and normalization, file formats.

mod icu;
mod ingest;
mod spirals;

pub use icu::{demo_patients, gen_icu, gen_icu_with_courses, IcuGenConfig, PatientCourse, ICU_FEATURES};
pub use ingest::{
    export_csv, export_json, ingest_csv, ingest_file, ingest_json, IngestOptions, IngestWarning, Ingested, CSV_HEADER,
    OUTCOME_FEATURE,
};
pub use spirals::{
    gen_spirals, gen_spirals_with_shapes, radially_monotone, spiral_feature_names, SpiralConfig, SpiralShape,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{IrregularSeries, NormStats};

/// Seeded split into `(first, second)` where `second` holds
/// `round(second_share · n)` series. Both keep the input order.
pub fn split<T: Clone>(items: &[T], second_share: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&second_share) {
        return Err(Error::contract("split share must lie in [0, 1)"));
    }
    let n = items.len();
    let n_second = (second_share * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_second = vec![false; n];
    for &i in &idx[..n_second] {
        in_second[i] = true;
    }
    let first = (0..n).filter(|&i| !in_second[i]).map(|i| items[i].clone()).collect();
    let second = (0..n).filter(|&i| in_second[i]).map(|i| items[i].clone()).collect();
    Ok((first, second))
}

/// Fits statistics on `train` only and applies them to every set.
pub fn normalize_with_train(
    train: &[IrregularSeries],
    others: &[&[IrregularSeries]],
) -> Result<(NormStats, Vec<IrregularSeries>, Vec<Vec<IrregularSeries>>)> {
    let stats = NormStats::fit(train)?;
    let apply = |set: &[IrregularSeries]| set.iter().map(|s| s.renormalized(&stats)).collect::<Result<Vec<_>>>();
    let train = apply(train)?;
    let others = others.iter().map(|s| apply(s)).collect::<Result<Vec<_>>>()?;
    Ok((stats, train, others))
}
