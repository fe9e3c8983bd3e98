use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IrregularSeries, NormStats};

/// Outward Archimedean spirals `r(t) = r0 + growth·t`, `φ(t) = φ0 ± turns·2π·t`
/// on the window `t ∈ [0, 1]`, thinned to irregular timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralConfig {
    pub n_series: usize,
    /// Points kept per series after thinning.
    pub points_per_series: usize,
    /// Size of the regular grid the kept points are drawn from.
    pub dense_points: usize,
    /// Share of clockwise series.
    pub clockwise_ratio: f64,
    pub noise_std: f64,
    pub turns: f64,
    pub growth: f64,
    pub seed: u64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        SpiralConfig {
            n_series: 200,
            points_per_series: 30,
            dense_points: 100,
            clockwise_ratio: 0.5,
            noise_std: 0.02,
            turns: 0.75,
            growth: 1.0,
            seed: 0,
        }
    }
}

impl SpiralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.points_per_series == 0 {
            return Err(Error::validation("spirals", "counts must be positive"));
        }
        if self.points_per_series > self.dense_points {
            return Err(Error::validation("points_per_series", "cannot exceed dense_points"));
        }
        if !(0.0..=1.0).contains(&self.clockwise_ratio) {
            return Err(Error::validation("clockwise_ratio", "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Parameters of one spiral, enough to evaluate it anywhere in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralShape {
    pub r0: f64,
    pub phase: f64,
    /// +1 counter-clockwise, −1 clockwise.
    pub direction: f64,
    pub turns: f64,
    pub growth: f64,
}

impl SpiralShape {
    pub fn radius(&self, t: f64) -> f64 {
        self.r0 + self.growth * t
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        let phi = self.phase + self.direction * self.turns * std::f64::consts::TAU * t;
        let r = self.radius(t);
        [r * phi.cos(), r * phi.sin()]
    }
}

pub fn spiral_feature_names() -> Vec<String> {
    vec!["x".into(), "y".into()]
}

/// Generated spirals in raw coordinates (identity normalization). Labels are
/// `true` for clockwise.
pub fn gen_spirals(config: &SpiralConfig) -> Result<Vec<IrregularSeries>> {
    Ok(gen_spirals_with_shapes(config)?.into_iter().map(|(s, _)| s).collect())
}

pub fn gen_spirals_with_shapes(config: &SpiralConfig) -> Result<Vec<(IrregularSeries, SpiralShape)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_cw = (config.clockwise_ratio * config.n_series as f64).round() as usize;
    let names = spiral_feature_names();
    let mut out = Vec::with_capacity(config.n_series);
    for i in 0..config.n_series {
        let clockwise = i < n_cw;
        let shape = SpiralShape {
            r0: rng.random_range(0.5..1.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            direction: if clockwise { -1.0 } else { 1.0 },
            turns: config.turns,
            growth: config.growth,
        };
        let mut idx = sample(&mut rng, config.dense_points, config.points_per_series).into_vec();
        idx.sort_unstable();
        let denom = (config.dense_points.max(2) - 1) as f64;
        let times: Vec<f64> = idx.iter().map(|&k| k as f64 / denom).collect();
        let values = times
            .iter()
            .map(|&t| {
                let p = shape.point(t);
                p.iter()
                    .map(|v| {
                        let e: f64 = rng.sample(StandardNormal);
                        v + config.noise_std * e
                    })
                    .collect()
            })
            .collect();
        let series = IrregularSeries {
            id: format!("spiral-{:04}", i),
            mask: vec![vec![true, true]; times.len()],
            times,
            values,
            feature_names: names.clone(),
            label: Some(clockwise),
            norm_stats: NormStats::identity(names.clone(), 1.0),
        };
        out.push((series, shape));
    }
    // mix the classes; generation order put all clockwise spirals first
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let order = sample(&mut rng, out.len(), out.len()).into_vec();
    let mut shuffled: Vec<_> = order.into_iter().map(|k| out[k].clone()).collect();
    for (i, (s, _)) in shuffled.iter_mut().enumerate() {
        s.id = format!("spiral-{:04}", i);
    }
    Ok(shuffled)
}

/// True when the radius `sqrt(x² + y²)` (raw units) never decreases along
/// the rows of `points`.
pub fn radially_monotone(points: &[Vec<f64>]) -> bool {
    let radii: Vec<f64> = points.iter().map(|p| p[0].hypot(p[1])).collect();
    radii.windows(2).all(|w| w[1] >= w[0])
}
