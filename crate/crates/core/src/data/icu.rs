//! Synthetic ICU cohort: a scalar severity process drives four vital signs.
//!
//! Severity `h(t)` (dimensionless, higher is sicker) follows a smooth AR(1)
//! wander around a per-patient baseline. Survivors drift slowly toward
//! recovery; patients who die start deteriorating at a random onset and
//! climb at a rate set by `separation`. Vitals are fixed affine responses of
//! `h` with measurement noise, then clipped to physiological ranges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IrregularSeries, NormStats};

pub const ICU_FEATURES: [&str; 4] = ["FiO2", "GCS", "HR", "PaO2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcuGenConfig {
    pub n_patients: usize,
    pub window_hours: f64,
    /// Per-hour observation probability, in `ICU_FEATURES` order.
    pub observation_rates: [f64; 4],
    pub death_ratio: f64,
    /// Deterioration rate (severity units per window) for patients who die.
    pub separation: f64,
    pub seed: u64,
}

impl Default for IcuGenConfig {
    fn default() -> Self {
        IcuGenConfig {
            n_patients: 400,
            window_hours: 48.0,
            observation_rates: [0.35, 0.3, 0.9, 0.12],
            death_ratio: 0.3,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl IcuGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::validation("n_patients", "must be positive"));
        }
        if !(self.window_hours >= 1.0) {
            return Err(Error::validation("window_hours", "must be at least one hour"));
        }
        if self.observation_rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::validation("observation_rates", "rates must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.death_ratio) {
            return Err(Error::validation("death_ratio", "must lie in [0, 1)"));
        }
        if !(self.separation >= 0.0) {
            return Err(Error::validation("separation", "must be non-negative"));
        }
        Ok(())
    }
}

/// Hidden course of one patient; `trend` is the noise-free severity.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientCourse {
    pub baseline: f64,
    pub dies: bool,
    /// Deterioration onset in window units (deaths only).
    pub onset: f64,
    pub rate: f64,
}

impl PatientCourse {
    pub fn trend(&self, t: f64) -> f64 {
        if self.dies {
            self.baseline + self.rate * (t - self.onset).max(0.0)
        } else {
            self.baseline - 0.4 * t
        }
    }
}

/// `(intercept, slope, noise std, lower clip, upper clip)` per feature.
const RESPONSES: [(f64, f64, f64, f64, f64); 4] = [
    (0.40, 0.12, 0.03, 0.21, 1.0),
    (13.0, -2.5, 0.6, 3.0, 15.0),
    (88.0, 10.0, 4.0, 30.0, 200.0),
    (105.0, -18.0, 8.0, 30.0, 500.0),
];

fn vital(feature: usize, severity: f64, rng: &mut impl Rng) -> f64 {
    let (a, b, noise, lo, hi) = RESPONSES[feature];
    let e: f64 = rng.sample(StandardNormal);
    (a + b * severity + noise * e).clamp(lo, hi)
}

fn draw_course(rng: &mut impl Rng, dies: bool, separation: f64) -> PatientCourse {
    let baseline = 0.6 * rng.sample::<f64, _>(StandardNormal);
    let onset = rng.random_range(0.1..0.6);
    let rate = separation * rng.random_range(0.7..1.3);
    PatientCourse { baseline, dies, onset, rate }
}

/// Simulates `course` on an hourly jittered grid and thins per feature.
fn simulate(
    id: String,
    course: &PatientCourse,
    rates: &[f64; 4],
    window_hours: f64,
    rng: &mut impl Rng,
) -> IrregularSeries {
    let hours = window_hours.round().max(1.0) as usize;
    let rho: f64 = 0.9;
    let mut wander = 0.0;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for k in 0..hours {
        let t = (k as f64 + rng.random_range(0.05..0.95)) / hours as f64;
        let e: f64 = rng.sample(StandardNormal);
        wander = rho * wander + (1.0 - rho * rho).sqrt() * 0.25 * e;
        let h = course.trend(t) + wander;
        let row: Vec<f64> = (0..4).map(|j| vital(j, h, rng)).collect();
        let m: Vec<bool> = rates.iter().map(|r| rng.random::<f64>() < *r).collect();
        if m.iter().any(|b| *b) {
            times.push(t);
            values.push(row.iter().zip(&m).map(|(v, m)| if *m { *v } else { 0.0 }).collect());
            mask.push(m);
        }
    }
    let names: Vec<String> = ICU_FEATURES.iter().map(|s| s.to_string()).collect();
    if times.is_empty() {
        // guarantee one observation so the series is valid
        let t = 0.5 / hours as f64;
        times.push(t);
        values.push(vec![0.0, 0.0, vital(2, course.trend(t), rng), 0.0]);
        mask.push(vec![false, false, true, false]);
    }
    IrregularSeries {
        id,
        times,
        values,
        mask,
        feature_names: names.clone(),
        label: Some(course.dies),
        norm_stats: NormStats::identity(names, window_hours),
    }
}

/// Generated cohort in raw clinical units. Exactly
/// `round(death_ratio · n_patients)` patients die.
pub fn gen_icu(config: &IcuGenConfig) -> Result<Vec<IrregularSeries>> {
    Ok(gen_icu_with_courses(config)?.into_iter().map(|(s, _)| s).collect())
}

pub fn gen_icu_with_courses(config: &IcuGenConfig) -> Result<Vec<(IrregularSeries, PatientCourse)>> {
    config.validate()?;
    let n = config.n_patients;
    let n_dead = (config.death_ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // spread deaths evenly through the cohort
    let mut dies = vec![false; n];
    for k in 0..n_dead {
        dies[(k * n) / n_dead.max(1)] = true;
    }
    let mut out = Vec::with_capacity(n);
    for (i, d) in dies.into_iter().enumerate() {
        let course = draw_course(&mut rng, d, config.separation);
        let s = simulate(format!("patient-{:04}", i), &course, &config.observation_rates, config.window_hours, &mut rng);
        out.push((s, course));
    }
    Ok(out)
}

/// Two fixed exemplars: patient A deteriorates from mid-window and dies,
/// patient B stays stable and survives. Dense observation rates so every
/// feature panel has data.
pub fn demo_patients() -> Vec<IrregularSeries> {
    let rates = [0.6, 0.5, 1.0, 0.3];
    let a = PatientCourse { baseline: 0.1, dies: true, onset: 0.35, rate: 3.0 };
    let b = PatientCourse { baseline: -0.1, dies: false, onset: 0.0, rate: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11ce);
    let sa = simulate("patient-A".into(), &a, &rates, 48.0, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0b);
    let sb = simulate("patient-B".into(), &b, &rates, 48.0, &mut rng);
    vec![sa, sb]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rate_gives_dense_mask() {
        let cfg = IcuGenConfig { n_patients: 5, observation_rates: [1.0; 4], ..IcuGenConfig::default() };
        for s in gen_icu(&cfg).unwrap() {
            assert_eq!(s.len(), 48);
            assert!(s.mask.iter().flatten().all(|m| *m));
        }
    }

    #[test]
    fn zero_death_ratio_means_no_deaths() {
        let cfg = IcuGenConfig { n_patients: 30, death_ratio: 0.0, ..IcuGenConfig::default() };
        assert!(gen_icu(&cfg).unwrap().iter().all(|s| s.label == Some(false)));
        let cfg = IcuGenConfig { n_patients: 30, death_ratio: 0.3, ..IcuGenConfig::default() };
        assert_eq!(gen_icu(&cfg).unwrap().iter().filter(|s| s.label == Some(true)).count(), 9);
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = IcuGenConfig { n_patients: 20, ..IcuGenConfig::default() };
        let a = gen_icu(&cfg).unwrap();
        assert_eq!(a, gen_icu(&cfg).unwrap());
        for s in &a {
            s.validate().unwrap();
            assert!(s.times.iter().all(|t| (0.0..1.0).contains(t)));
        }
    }

    #[test]
    fn sparsity_ordering_follows_rates() {
        let cfg = IcuGenConfig { n_patients: 50, ..IcuGenConfig::default() };
        let mut counts = [0usize; 4];
        for s in gen_icu(&cfg).unwrap() {
            for row in &s.mask {
                for j in 0..4 {
                    counts[j] += row[j] as usize;
                }
            }
        }
        // PaO2 sparsest, HR densest
        assert!(counts[3] < counts[1] && counts[1] < counts[0] && counts[0] < counts[2], "{:?}", counts);
    }

    #[test]
    fn deaths_drift_gcs_down_and_fio2_up() {
        let cfg = IcuGenConfig { n_patients: 200, ..IcuGenConfig::default() };
        let late_mean = |dies: bool, j: usize| {
            let (mut sum, mut n) = (0.0, 0);
            for s in gen_icu(&cfg).unwrap().iter().filter(|s| s.label == Some(dies)) {
                for r in 0..s.len() {
                    if s.times[r] > 0.8 && s.mask[r][j] {
                        sum += s.values[r][j];
                        n += 1;
                    }
                }
            }
            sum / n as f64
        };
        assert!(late_mean(true, 1) < late_mean(false, 1) - 2.0);
        assert!(late_mean(true, 0) > late_mean(false, 0) + 0.1);
    }

    #[test]
    fn demo_patients_have_the_right_outcomes() {
        let d = demo_patients();
        assert_eq!(d[0].id, "patient-A");
        assert_eq!(d[0].label, Some(true));
        assert_eq!(d[1].label, Some(false));
        for s in &d {
            s.validate().unwrap();
        }
    }
}
