//! Trajectory ensembles, horizon of predictability, risk curves, time
//! inversion and hypothetical-point conditioning.
//!
//! Times are in window units throughout (`[0, 1]` is the observation
//! window); values are in normalized units unless a field says otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    classify_state, decode, encode, evolve, integrate_latent, reparameterize, IrregularSeries, LatentPath,
    LatentPosterior, ModelParams, NormStats, Reconstruction,
};
use crate::odeint::Tolerances;
use crate::training::{sample_noise, FRACTIONS};

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleOptions {
    /// Ensemble size K.
    pub members: usize,
    /// The grid runs to `horizon_mult` window lengths.
    pub horizon_mult: f64,
    /// Uniform grid knots per window length.
    pub knots_per_window: usize,
    pub theta_hop: f64,
    pub threshold: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            members: 30,
            horizon_mult: 1.5,
            knots_per_window: 48,
            theta_hop: 1.0,
            threshold: 0.5,
            rtol: Tolerances::SERVING.rtol,
            atol: Tolerances::SERVING.atol,
        }
    }
}

impl EnsembleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.members < 1 {
            return Err(Error::validation("K", "must be at least 1"));
        }
        if !(self.horizon_mult >= 1.0 && self.horizon_mult <= 100.0) {
            return Err(Error::validation("horizon_mult", "must lie in [1, 100]"));
        }
        if self.knots_per_window < 1 || self.knots_per_window > 10_000 {
            return Err(Error::validation("knots_per_window", "must lie in [1, 10000]"));
        }
        if !(self.theta_hop >= 0.0) {
            return Err(Error::validation("theta_hop", "must be non-negative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold", "must lie in (0, 1)"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::validation("tolerance", "must be positive"));
        }
        Ok(())
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances::new(self.rtol, self.atol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "time")]
pub enum Hop {
    At(f64),
    BeyondGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub duration: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub points: Vec<RiskPoint>,
    pub threshold: f64,
    /// First duration whose probability is strictly above the threshold.
    pub first_crossing: Option<f64>,
}

impl RiskCurve {
    fn new(points: Vec<RiskPoint>, threshold: f64) -> Self {
        let first_crossing = points.iter().find(|p| p.probability > threshold).map(|p| p.duration);
        RiskCurve { points, threshold, first_crossing }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub seed: u64,
    pub noise: Vec<f64>,
    pub latent: LatentPath,
    pub reconstruction: Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub grid: Vec<f64>,
    pub observed_end: f64,
    pub seed: u64,
    pub requested: usize,
    pub dropped: usize,
    pub members: Vec<Member>,
    /// `spread[t][j]`: population std over members.
    pub spread: Vec<Vec<f64>>,
    pub hop: Hop,
    pub theta_hop: f64,
    pub risk_curve: RiskCurve,
}

impl TrajectoryEnsemble {
    /// Feature-averaged spread per grid time.
    pub fn pooled_spread(&self) -> Vec<f64> {
        pooled(&self.spread)
    }

    /// Per-time member mean, summed in sorted order so it does not depend on
    /// member order.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let f = self.spread.first().map_or(0, |r| r.len());
        (0..self.grid.len())
            .map(|t| (0..f).map(|j| sorted_mean(&mut self.column(t, j))).collect())
            .collect()
    }

    /// Mean Euclidean distance between decoded members at grid index `t`
    /// (normalized units); 0 with fewer than two members.
    pub fn mean_pairwise_distance(&self, t: usize) -> f64 {
        let rows: Vec<&[f64]> = self.members.iter().map(|m| m.reconstruction.means[t].as_slice()).collect();
        let mut d = Vec::new();
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                d.push(a.iter().zip(*b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            }
        }
        if d.is_empty() {
            0.0
        } else {
            sorted_mean(&mut d)
        }
    }

    fn column(&self, t: usize, j: usize) -> Vec<f64> {
        self.members.iter().map(|m| m.reconstruction.means[t][j]).collect()
    }
}

fn sorted_mean(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn sorted_std(v: &mut [f64]) -> f64 {
    let mean = sorted_mean(v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    sorted_mean(&mut dev).sqrt()
}

fn pooled(spread: &[Vec<f64>]) -> Vec<f64> {
    spread.iter().map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64).collect()
}

/// Uniform knots from 0 to `horizon_mult`, plus any `extra` times.
pub fn ensemble_grid(horizon_mult: f64, knots_per_window: usize, extra: &[f64]) -> Vec<f64> {
    let n = (horizon_mult * knots_per_window as f64 - 1e-9).ceil() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| (k as f64 / knots_per_window as f64).min(horizon_mult)).collect();
    grid.extend_from_slice(extra);
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    grid
}

fn member_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Draws `count` members from `posterior`; divergent members are dropped and
/// counted.
fn draw_members(
    posterior: &LatentPosterior,
    params: &ModelParams,
    grid: &[f64],
    observed_end: f64,
    count: usize,
    seed: u64,
    tol: Tolerances,
) -> Result<(Vec<Member>, usize)> {
    let seeds = member_seeds(seed, count);
    let results: Vec<Result<Member>> = seeds
        .par_iter()
        .map(|&s| {
            let (xi, noise) = sample_noise(s, params.arch.latent_dim, params.arch.noise_dim);
            let z0 = reparameterize(posterior, &xi);
            let latent = evolve(&z0, &noise, grid, params, tol)?;
            let reconstruction = decode(&latent, params, observed_end);
            if reconstruction.means.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain("non-finite decoded value".into()));
            }
            Ok(Member { seed: s, noise, latent, reconstruction })
        })
        .collect();
    let mut members = Vec::with_capacity(count);
    let mut dropped = 0;
    for r in results {
        match r {
            Ok(m) => members.push(m),
            Err(e) if e.is_solver_failure() => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped * 4 > count {
        return Err(Error::EnsembleDegenerate { dropped, requested: count });
    }
    Ok((members, dropped))
}

fn spread_of(members: &[Member], n_times: usize, n_features: usize) -> Vec<Vec<f64>> {
    (0..n_times)
        .map(|t| {
            (0..n_features)
                .map(|j| sorted_std(&mut members.iter().map(|m| m.reconstruction.means[t][j]).collect::<Vec<_>>()))
                .collect()
        })
        .collect()
}

fn hop_from_spread(grid: &[f64], spread: &[Vec<f64>], observed_end: f64, theta: f64) -> Hop {
    grid.iter()
        .zip(pooled(spread))
        .find(|(t, s)| **t > observed_end + 1e-12 && *s > theta)
        .map_or(Hop::BeyondGrid, |(t, _)| Hop::At(*t))
}

/// Earliest grid time after the observed span where the pooled spread
/// exceeds `theta`.
pub fn estimate_hop(ensemble: &TrajectoryEnsemble, theta: f64) -> Result<Hop> {
    if ensemble.members.len() < 2 {
        return Err(Error::contract("horizon of predictability needs at least two members"));
    }
    Ok(hop_from_spread(&ensemble.grid, &ensemble.spread, ensemble.observed_end, theta))
}

fn assemble(
    grid: Vec<f64>,
    observed_end: f64,
    seed: u64,
    requested: usize,
    dropped: usize,
    members: Vec<Member>,
    theta_hop: f64,
    risk_curve: RiskCurve,
) -> TrajectoryEnsemble {
    let n_features = members.first().map_or(0, |m| m.reconstruction.means.first().map_or(0, |r| r.len()));
    let spread = spread_of(&members, grid.len(), n_features);
    let hop = hop_from_spread(&grid, &spread, observed_end, theta_hop);
    TrajectoryEnsemble { grid, observed_end, seed, requested, dropped, members, spread, hop, theta_hop, risk_curve }
}

/// Ensemble from an explicit posterior over `z0`. The risk curve is read
/// from the posterior-mean path at every grid knot after `observed_end`.
pub fn sample_from_posterior(
    posterior: &LatentPosterior,
    params: &ModelParams,
    observed_end: f64,
    opts: &EnsembleOptions,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    opts.validate()?;
    let grid = ensemble_grid(opts.horizon_mult, opts.knots_per_window, &[observed_end]);
    let (members, dropped) =
        draw_members(posterior, params, &grid, observed_end, opts.members, seed, opts.tolerances())?;
    let risk = extrapolated_risk(posterior, params, &grid, observed_end, opts.tolerances())?;
    Ok(assemble(grid, observed_end, seed, opts.members, dropped, members, opts.theta_hop, RiskCurve::new(risk, opts.threshold)))
}

fn extrapolated_risk(
    posterior: &LatentPosterior,
    params: &ModelParams,
    grid: &[f64],
    observed_end: f64,
    tol: Tolerances,
) -> Result<Vec<RiskPoint>> {
    let knots: Vec<f64> = grid.iter().copied().filter(|t| *t > observed_end + 1e-12).collect();
    let noise = vec![0.0; params.arch.noise_dim];
    let path = evolve(&posterior.mean, &noise, &knots, params, tol)?;
    Ok(path
        .times
        .iter()
        .zip(&path.states)
        .map(|(t, z)| RiskPoint { duration: *t, probability: classify_state(z, params) })
        .collect())
}

/// K-member ensemble after encoding the first `fraction` of the window.
///
/// The risk curve holds the standard fractions up to `fraction` (skipping
/// prefixes with no observation), then the extrapolated knots.
pub fn sample_ensemble(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    opts: &EnsembleOptions,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    opts.validate()?;
    let posterior = encode(series, params, fraction)?;
    let mut ens = sample_from_posterior(&posterior, params, fraction, opts, seed)?;
    let mut fractions: Vec<f64> = FRACTIONS
        .iter()
        .copied()
        .filter(|f| *f < fraction - 1e-12 && !series.observed_rows(*f).is_empty())
        .collect();
    fractions.push(fraction);
    let mut points = risk_curve(series, params, &fractions, opts.threshold, opts.tolerances())?.points;
    points.append(&mut ens.risk_curve.points);
    ens.risk_curve = RiskCurve::new(points, opts.threshold);
    Ok(ens)
}

/// Outcome probability after each prefix, from the posterior-mean path.
pub fn risk_curve(
    series: &IrregularSeries,
    params: &ModelParams,
    fractions: &[f64],
    threshold: f64,
    tol: Tolerances,
) -> Result<RiskCurve> {
    if fractions.is_empty() || fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("fractions must be non-empty and strictly increasing"));
    }
    let points = fractions
        .iter()
        .map(|&f| {
            Ok(RiskPoint { duration: f, probability: crate::eval::point_probability(series, params, f, tol)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskCurve::new(points, threshold))
}

/// Integrates the dynamics backwards from `z_at` at `from_time` to each of
/// `to_times` (non-increasing, none after `from_time`).
pub fn reconstruct_past(
    z_at: &[f64],
    noise: &[f64],
    from_time: f64,
    to_times: &[f64],
    params: &ModelParams,
    tol: Tolerances,
) -> Result<LatentPath> {
    if to_times.iter().any(|t| *t > from_time) {
        return Err(Error::contract("reconstruct_past targets must not lie after the start time"));
    }
    if to_times.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::contract("reconstruct_past targets must be non-increasing"));
    }
    if to_times.iter().all(|t| *t == from_time) {
        return Ok(LatentPath { times: to_times.to_vec(), states: vec![z_at.to_vec(); to_times.len()] });
    }
    integrate_latent(z_at, noise, from_time, to_times, params, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypotheticalPoint {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
    pub tolerance: f64,
}

impl HypotheticalPoint {
    pub fn validate(&self, n_features: usize, horizon: f64) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("tolerance", "must be positive"));
        }
        if self.feature >= n_features {
            return Err(Error::validation("feature", format!("index {} out of range for {} features", self.feature, n_features)));
        }
        if !(self.time >= 0.0 && self.time <= horizon) {
            return Err(Error::validation("time", format!("must lie in [0, {}]", horizon)));
        }
        if !self.value.is_finite() {
            return Err(Error::validation("value", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedEnsemble {
    pub ensemble: TrajectoryEnsemble,
    pub point: HypotheticalPoint,
    pub proposals: usize,
    pub ess: f64,
    /// Index of the query time in the grid.
    pub query_index: usize,
    /// Mean |decoded − value| over all proposals.
    pub proposal_mean_distance: f64,
    /// The same distance under the importance weights.
    pub weighted_mean_distance: f64,
    /// Mean distance over the resampled members.
    pub conditioned_mean_distance: f64,
    pub best_distance: f64,
}

/// Weights from the Gaussian kernel on `distances`, normalized in log space.
pub fn kernel_weights(distances: &[f64], tolerance: f64) -> Vec<f64> {
    let logw: Vec<f64> = distances.iter().map(|d| -0.5 * (d / tolerance).powi(2)).collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: `k` indices with one uniform offset.
pub fn systematic_resample(weights: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let u: f64 = rng.random::<f64>();
    let mut out = Vec::with_capacity(k);
    let mut cum = weights[0];
    let mut i = 0;
    for m in 0..k {
        let target = (u + m as f64) / k as f64;
        while cum < target && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Family of K members drawn from `proposals` ensemble proposals, resampled
/// by a Gaussian kernel on their distance to `point`.
pub fn condition_on_point(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    point: HypotheticalPoint,
    proposals: usize,
    opts: &EnsembleOptions,
    seed: u64,
) -> Result<ConditionedEnsemble> {
    opts.validate()?;
    point.validate(params.arch.n_features, opts.horizon_mult)?;
    if proposals < opts.members {
        return Err(Error::validation("M", "must be at least K"));
    }
    let posterior = encode(series, params, fraction)?;
    let tol = opts.tolerances();
    let grid = ensemble_grid(opts.horizon_mult, opts.knots_per_window, &[fraction, point.time]);
    let query_index = grid.iter().position(|t| (t - point.time).abs() < 1e-12).expect("query time is on the grid");
    let (mut pool, dropped) = draw_members(&posterior, params, &grid, fraction, proposals, seed, tol)?;

    let dist = |m: &Member| (m.reconstruction.means[query_index][point.feature] - point.value).abs();
    // nearest first, so resampling favours close members deterministically
    pool.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.seed.cmp(&b.seed)));
    let distances: Vec<f64> = pool.iter().map(dist).collect();
    let weights = kernel_weights(&distances, point.tolerance);
    let ess = effective_sample_size(&weights);
    let best_distance = distances.first().copied().unwrap_or(f64::INFINITY);
    if !(ess >= 5.0) {
        return Err(Error::QueryInfeasible { ess, best_distance });
    }
    let n = distances.len() as f64;
    let proposal_mean_distance = distances.iter().sum::<f64>() / n;
    let weighted_mean_distance = weights.iter().zip(&distances).map(|(w, d)| w * d).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5245_5341_4d50);
    let picks = systematic_resample(&weights, opts.members, &mut rng);
    let conditioned_mean_distance = picks.iter().map(|&i| distances[i]).sum::<f64>() / picks.len() as f64;
    let members: Vec<Member> = picks.iter().map(|&i| pool[i].clone()).collect();

    let risk = extrapolated_risk(&posterior, params, &grid, fraction, tol)?;
    let ensemble =
        assemble(grid, fraction, seed, opts.members, dropped, members, opts.theta_hop, RiskCurve::new(risk, opts.threshold));
    Ok(ConditionedEnsemble {
        ensemble,
        point,
        proposals,
        ess,
        query_index,
        proposal_mean_distance,
        weighted_mean_distance,
        conditioned_mean_distance,
        best_distance,
    })
}

/// Backward paths from the query time to the grid start for the `n`
/// distinct conditioned members nearest the point.
pub fn backward_traces(cond: &ConditionedEnsemble, params: &ModelParams, n: usize, tol: Tolerances) -> Result<Vec<(u64, Reconstruction)>> {
    let q = cond.query_index;
    let mut seen = Vec::new();
    let mut out = Vec::new();
    let to_times: Vec<f64> = cond.ensemble.grid[..=q].iter().rev().copied().collect();
    // members are already ordered nearest first
    for m in &cond.ensemble.members {
        if out.len() == n {
            break;
        }
        if seen.contains(&m.seed) {
            continue;
        }
        seen.push(m.seed);
        let mut path = reconstruct_past(&m.latent.states[q], &m.noise, cond.point.time, &to_times, params, tol)?;
        path.times.reverse();
        path.states.reverse();
        out.push((m.seed, decode(&path, params, cond.ensemble.observed_end)));
    }
    Ok(out)
}

// ---- export document ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPoint {
    pub time: f64,
    pub time_hours: f64,
    pub feature: usize,
    pub value: f64,
    pub raw_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberExport {
    pub seed: u64,
    /// `values[t][j]`, normalized units.
    pub values: Vec<Vec<f64>>,
    pub raw_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPointExport {
    pub duration: f64,
    pub duration_hours: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleExport {
    pub schema_version: u32,
    pub series_id: String,
    pub feature_names: Vec<String>,
    pub window_hours: f64,
    pub seed: u64,
    pub requested: usize,
    pub dropped: usize,
    pub times: Vec<f64>,
    pub times_hours: Vec<f64>,
    pub observed_end: f64,
    pub observed_end_hours: f64,
    pub observed_flag: Vec<bool>,
    pub observations: Vec<ObservationPoint>,
    pub members: Vec<MemberExport>,
    pub mean: Vec<Vec<f64>>,
    pub raw_mean: Vec<Vec<f64>>,
    pub spread: Vec<Vec<f64>>,
    pub raw_spread: Vec<Vec<f64>>,
    pub pooled_spread: Vec<f64>,
    pub theta_hop: f64,
    pub hop: Hop,
    pub hop_hours: Option<f64>,
    pub threshold: f64,
    pub risk_curve: Vec<RiskPointExport>,
    pub first_crossing: Option<f64>,
    pub first_crossing_hours: Option<f64>,
}

fn raw_matrix(m: &[Vec<f64>], stats: &NormStats) -> Vec<Vec<f64>> {
    m.iter().map(|row| row.iter().enumerate().map(|(j, v)| stats.to_raw(j, *v)).collect()).collect()
}

/// Wire document for an ensemble, in normalized and raw units.
pub fn export_ensemble(ens: &TrajectoryEnsemble, series: &IrregularSeries, stats: &NormStats) -> EnsembleExport {
    let w = stats.window_hours;
    let mut observations = Vec::new();
    for r in 0..series.len() {
        for j in 0..series.n_features() {
            if series.mask[r][j] {
                let v = series.values[r][j];
                observations.push(ObservationPoint {
                    time: series.times[r],
                    time_hours: series.times[r] * w,
                    feature: j,
                    value: v,
                    raw_value: stats.to_raw(j, v),
                });
            }
        }
    }
    let mean = ens.mean();
    let hop_hours = match ens.hop {
        Hop::At(t) => Some(t * w),
        Hop::BeyondGrid => None,
    };
    EnsembleExport {
        schema_version: EXPORT_SCHEMA_VERSION,
        series_id: series.id.clone(),
        feature_names: stats.feature_names.clone(),
        window_hours: w,
        seed: ens.seed,
        requested: ens.requested,
        dropped: ens.dropped,
        times: ens.grid.clone(),
        times_hours: ens.grid.iter().map(|t| t * w).collect(),
        observed_end: ens.observed_end,
        observed_end_hours: ens.observed_end * w,
        observed_flag: ens.grid.iter().map(|t| *t <= ens.observed_end).collect(),
        observations,
        members: ens
            .members
            .iter()
            .map(|m| MemberExport {
                seed: m.seed,
                values: m.reconstruction.means.clone(),
                raw_values: raw_matrix(&m.reconstruction.means, stats),
            })
            .collect(),
        raw_mean: raw_matrix(&mean, stats),
        mean,
        raw_spread: ens.spread.iter().map(|row| row.iter().enumerate().map(|(j, s)| s * stats.stds[j]).collect()).collect(),
        spread: ens.spread.clone(),
        pooled_spread: ens.pooled_spread(),
        theta_hop: ens.theta_hop,
        hop: ens.hop,
        hop_hours,
        threshold: ens.risk_curve.threshold,
        risk_curve: ens
            .risk_curve
            .points
            .iter()
            .map(|p| RiskPointExport { duration: p.duration, duration_hours: p.duration * w, probability: p.probability })
            .collect(),
        first_crossing: ens.risk_curve.first_crossing,
        first_crossing_hours: ens.risk_curve.first_crossing.map(|t| t * w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_series, Architecture};

    fn small_opts(k: usize) -> EnsembleOptions {
        EnsembleOptions { members: k, knots_per_window: 10, ..EnsembleOptions::default() }
    }

    fn model() -> ModelParams {
        ModelParams::init(&Architecture::new(2), 0.3, 7)
    }

    #[test]
    fn grid_covers_window_and_horizon() {
        let g = ensemble_grid(1.5, 4, &[0.3]);
        assert_eq!(g, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0, 1.25, 1.5]);
        assert_eq!(ensemble_grid(1.1, 4, &[]).last(), Some(&1.1));
    }

    #[test]
    fn point_mass_single_member_has_no_spread() {
        let p = model();
        let post = LatentPosterior::point_mass(vec![0.2; p.arch.latent_dim]);
        let mut opts = small_opts(1);
        let ens = sample_from_posterior(&post, &p, 1.0, &opts, 3).unwrap();
        assert!(ens.spread.iter().flatten().all(|s| *s == 0.0));
        assert_eq!(ens.hop, Hop::BeyondGrid);
        opts.members = 5;
        let ens = sample_from_posterior(&post, &p, 1.0, &opts, 3).unwrap();
        assert_eq!(ens.members.len(), 5);
        assert!(estimate_hop(&sample_from_posterior(&post, &p, 1.0, &small_opts(1), 3).unwrap(), 1.0).is_err());
    }

    #[test]
    fn zero_dynamics_gives_constant_members() {
        let p = ModelParams::zeros(&Architecture::new(2), 0.3);
        let mut p2 = model();
        p2.dynamics = p.dynamics;
        let ens = sample_ensemble(&tiny_series(), &p2, 1.0, &small_opts(6), 11).unwrap();
        for m in &ens.members {
            for row in &m.reconstruction.means {
                assert_eq!(row, &m.reconstruction.means[0]);
            }
        }
        for row in &ens.spread {
            assert_eq!(row, &ens.spread[0]);
        }
    }

    #[test]
    fn hop_boundary_and_threshold_order() {
        let p = model();
        let ens = sample_ensemble(&tiny_series(), &p, 0.5, &small_opts(8), 5).unwrap();
        assert_eq!(estimate_hop(&ens, f64::INFINITY).unwrap(), Hop::BeyondGrid);
        // a zero threshold is exceeded at the first knot after the observed span
        let first_after = *ens.grid.iter().find(|t| **t > 0.5).unwrap();
        assert!(ens.pooled_spread().iter().all(|s| *s > 0.0));
        assert_eq!(estimate_hop(&ens, 0.0).unwrap(), Hop::At(first_after));
        let order = |h: Hop| match h {
            Hop::At(t) => t,
            Hop::BeyondGrid => f64::INFINITY,
        };
        let mut last = 0.0;
        for theta in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let h = order(estimate_hop(&ens, theta).unwrap());
            assert!(h >= last);
            last = h;
        }
    }

    #[test]
    fn ensembles_are_seeded_and_exchangeable() {
        let p = model();
        let s = tiny_series();
        let a = sample_ensemble(&s, &p, 1.0, &small_opts(7), 21).unwrap();
        assert_eq!(a, sample_ensemble(&s, &p, 1.0, &small_opts(7), 21).unwrap());
        assert_ne!(a.members, sample_ensemble(&s, &p, 1.0, &small_opts(7), 22).unwrap().members);
        let mut members = a.members.clone();
        members.reverse();
        members.swap(0, 3);
        let b = assemble(a.grid.clone(), a.observed_end, a.seed, a.requested, a.dropped, members, a.theta_hop, a.risk_curve.clone());
        assert_eq!(b.spread, a.spread);
        assert_eq!(b.hop, a.hop);
        assert_eq!(b.mean(), a.mean());
    }

    #[test]
    fn zero_classifier_risk_is_flat_without_crossing() {
        let mut p = model();
        p.classifier = ModelParams::zeros(&p.arch, 0.3).classifier;
        let r = risk_curve(&tiny_series(), &p, &[0.5, 1.0], 0.5, Tolerances::SERVING).unwrap();
        assert!(r.points.iter().all(|q| q.probability == 0.5));
        assert_eq!(r.first_crossing, None);
        let full = risk_curve(&tiny_series(), &model(), &[1.0], 0.5, Tolerances::SERVING).unwrap();
        let direct = crate::eval::point_probability(&tiny_series(), &model(), 1.0, Tolerances::SERVING).unwrap();
        assert_eq!(full.points, vec![RiskPoint { duration: 1.0, probability: direct }]);
        assert!(risk_curve(&tiny_series(), &p, &[1.0, 0.5], 0.5, Tolerances::SERVING).is_err());
    }

    #[test]
    fn time_inversion() {
        let p = model();
        let z: Vec<f64> = (0..p.arch.latent_dim).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
        let z = &z[..];
        let noise = vec![0.1; p.arch.noise_dim];
        let same = reconstruct_past(z, &noise, 0.7, &[0.7], &p, Tolerances::SERVING).unwrap();
        assert_eq!(same.states, vec![z.to_vec()]);
        let tight = Tolerances::new(1e-10, 1e-12);
        let fwd = evolve(z, &noise, &[1.0], &p, tight).unwrap();
        let back = reconstruct_past(&fwd.states[0], &noise, 1.0, &[0.5, 0.0], &p, tight).unwrap();
        for (a, b) in back.states[1].iter().zip(z) {
            assert!((a - b).abs() < 1e-4);
        }
        let zero = ModelParams::zeros(&p.arch, 0.3);
        let flat = reconstruct_past(z, &noise, 1.0, &[0.6, 0.2], &zero, tight).unwrap();
        assert!(flat.states.iter().all(|s| s == z));
        assert!(reconstruct_past(z, &noise, 0.5, &[0.6], &p, tight).is_err());
    }

    #[test]
    fn kernel_limits() {
        let d = [0.0, 1.0, 2.0, 5.0];
        let w = kernel_weights(&d, 1e12);
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-12));
        assert!((effective_sample_size(&w) - 4.0).abs() < 1e-9);
        let w = kernel_weights(&[100.0, 101.0], 0.01);
        assert!(w.iter().all(|x| x.is_finite()));
        assert_eq!(w[0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(systematic_resample(&[0.25; 4], 4, &mut rng), vec![0, 1, 2, 3]);
        assert_eq!(systematic_resample(&[0.0, 1.0, 0.0], 3, &mut rng), vec![1, 1, 1]);
    }

    #[test]
    fn conditioning_contracts() {
        let p = model();
        let s = tiny_series();
        let opts = small_opts(6);
        let far = HypotheticalPoint { time: 1.2, feature: 0, value: 10.0, tolerance: 0.05 };
        match condition_on_point(&s, &p, 1.0, far, 300, &opts, 1) {
            Err(Error::QueryInfeasible { ess, best_distance }) => {
                assert!(ess < 5.0);
                assert!(best_distance > 5.0);
            }
            other => panic!("expected infeasible, got {:?}", other.map(|c| c.ess)),
        }
        let bad = HypotheticalPoint { feature: 9, ..far };
        assert!(matches!(condition_on_point(&s, &p, 1.0, bad, 300, &opts, 1), Err(Error::Validation { .. })));
        // a very wide kernel gives a plain systematic subsample
        let wide = HypotheticalPoint { tolerance: 1e9, ..far };
        let c = condition_on_point(&s, &p, 1.0, wide, 60, &opts, 1).unwrap();
        assert!((c.ess - 60.0).abs() < 1e-6);
        let seeds: Vec<u64> = c.ensemble.members.iter().map(|m| m.seed).collect();
        let mut uniq = seeds.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 6);
        let traces = backward_traces(&c, &p, 3, Tolerances::SERVING).unwrap();
        assert_eq!(traces.len(), 3);
        let q = c.query_index;
        for (seed, rec) in &traces {
            let m = c.ensemble.members.iter().find(|m| m.seed == *seed).unwrap();
            assert_eq!(rec.times, c.ensemble.grid[..=q].to_vec());
            for (a, b) in rec.means.iter().flatten().zip(m.reconstruction.means[..=q].iter().flatten()) {
                assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn export_round_trips_units() {
        let p = model();
        let mut s = tiny_series();
        s.norm_stats.means = vec![10.0, -1.0];
        s.norm_stats.stds = vec![2.0, 0.5];
        s.norm_stats.window_hours = 48.0;
        let ens = sample_ensemble(&s, &p, 1.0, &small_opts(3), 2).unwrap();
        let doc = export_ensemble(&ens, &s, &s.norm_stats);
        assert_eq!(doc.members.len(), 3);
        assert_eq!(doc.times_hours.last(), Some(&72.0));
        let v = doc.members[1].values[4][1];
        assert_eq!(doc.members[1].raw_values[4][1], v * 0.5 - 1.0);
        assert_eq!(doc.raw_spread[4][0], doc.spread[4][0] * 2.0);
        let json = serde_json::to_string(&doc).unwrap();
        let back: EnsembleExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        let flags = &doc.observed_flag;
        let k = flags.iter().position(|f| !f).unwrap();
        assert!(flags[..k].iter().all(|f| *f) && flags[k..].iter().all(|f| !f));
    }
}
