use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dynamics::LatentDynamics;
use super::params::{ModelParams, ModelVars};
use super::series::IrregularSeries;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::odeint::{Dopri5, OdeProblem, Tolerances};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 3.0;

/// Diagonal Gaussian over the initial latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::contract("posterior mean and std differ in length"));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|s| *s <= 0.0) {
            return Err(Error::contract("posterior must be finite with positive std"));
        }
        Ok(LatentPosterior { mean, std })
    }

    /// Zero-width posterior; every draw returns `mean`.
    pub fn point_mass(mean: Vec<f64>) -> Self {
        let std = vec![0.0; mean.len()];
        LatentPosterior { mean, std }
    }

    pub fn standard_normal(dim: usize) -> Self {
        LatentPosterior { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Latent states along a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Decoded feature means along a grid. `observed_flag[i]` is true while the
/// grid is inside the span the encoder saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub times: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub observed_flag: Vec<bool>,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction must lie in (0, 1], got {}", fraction)));
    }
    Ok(())
}

/// Runs the recurrent encoder on `tape`, newest observation first, and
/// returns `(mean, log_std)` handles. `log_std` is clamped.
pub(crate) fn encode_on_tape(
    tape: &Tape,
    vars: &ModelVars,
    params: &ModelParams,
    series: &IrregularSeries,
    fraction: f64,
) -> Result<(Var, Var)> {
    check_fraction(fraction)?;
    if series.n_features() != params.arch.n_features {
        return Err(Error::contract(format!(
            "series has {} features, model expects {}",
            series.n_features(),
            params.arch.n_features
        )));
    }
    let rows = series.observed_rows(fraction);
    if rows.is_empty() {
        return Err(Error::EmptyWindow { fraction });
    }
    let f = series.n_features();
    let hidden = params.arch.encoder_hidden;
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    for (k, &r) in rows.iter().enumerate().rev() {
        let prev = if k == 0 { 0.0 } else { series.times[rows[k - 1]] };
        let mut x = Vec::with_capacity(2 * f + 1);
        x.extend(series.masked_row(r));
        x.extend(series.mask[r].iter().map(|m| if *m { 1.0 } else { 0.0 }));
        x.push(series.times[r] - prev);
        let xv = tape.constant(Tensor::vector(x)?);
        h = vars.encoder.step(tape, xv, h)?;
    }
    let out = vars.posterior_head.apply(tape, h)?;
    let l = params.arch.latent_dim;
    let mean = tape.slice(out, 0, l)?;
    let raw_log_std = tape.slice(out, l, l)?;
    let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)?;
    Ok((mean, log_std))
}

/// Posterior over `z0` from the observations in the first `fraction` of the
/// window.
pub fn encode(series: &IrregularSeries, params: &ModelParams, fraction: f64) -> Result<LatentPosterior> {
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let (mean, log_std) = encode_on_tape(&tape, &vars, params, series, fraction)?;
    let std = tape.to_vec(log_std).into_iter().map(f64::exp).collect();
    Ok(LatentPosterior { mean: tape.to_vec(mean), std })
}

pub fn standard_normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `mean + std ⊙ ξ`, `ξ ~ N(0, I)` from a generator seeded with `seed`.
pub fn sample_z0(posterior: &LatentPosterior, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reparameterize(posterior, &standard_normals(&mut rng, posterior.dim()))
}

pub fn reparameterize(posterior: &LatentPosterior, xi: &[f64]) -> Vec<f64> {
    posterior.mean.iter().zip(&posterior.std).zip(xi).map(|((m, s), x)| m + s * x).collect()
}

/// Integrates the latent dynamics from `z` at `t_from` to each of `times`
/// (ordered in the direction of travel; earlier times integrate backwards).
pub fn integrate_latent(
    z: &[f64],
    noise: &[f64],
    t_from: f64,
    times: &[f64],
    params: &ModelParams,
    tol: Tolerances,
) -> Result<LatentPath> {
    if z.len() != params.arch.latent_dim {
        return Err(Error::contract(format!("latent of dimension {} for model with {}", z.len(), params.arch.latent_dim)));
    }
    let Some(&t_last) = times.last() else {
        return Ok(LatentPath { times: vec![], states: vec![] });
    };
    let f = LatentDynamics::new(&params.dynamics, noise)?;
    let problem = OdeProblem::new(&f, z.to_vec(), (t_from, t_last), times.to_vec())?;
    let sol = Dopri5::from(tol).solve(&problem)?;
    Ok(LatentPath { times: sol.times, states: sol.states })
}

/// Forward evolution from `z0` at `t = 0` over a sorted, non-negative grid.
pub fn evolve(z0: &[f64], noise: &[f64], times: &[f64], params: &ModelParams, tol: Tolerances) -> Result<LatentPath> {
    if times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::contract("evolve grid must start at or after t = 0"));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::contract("evolve grid must be sorted"));
    }
    integrate_latent(z0, noise, 0.0, times, params, tol)
}

pub fn decode(path: &LatentPath, params: &ModelParams, observed_end: f64) -> Reconstruction {
    Reconstruction {
        times: path.times.clone(),
        means: path.states.iter().map(|z| params.decoder.forward(z)).collect(),
        observed_flag: path.times.iter().map(|t| *t <= observed_end).collect(),
    }
}

/// Outcome probability from a single latent state.
pub fn classify_state(z: &[f64], params: &ModelParams) -> f64 {
    let logit = params.classifier.forward(z)[0];
    crate::autodiff::sigmoid(logit)
}

/// Outcome probability read from the last state of `path`; callers build the
/// path so that it ends at the last observed time.
pub fn classify(path: &LatentPath, params: &ModelParams) -> Result<f64> {
    let z = path.states.last().ok_or_else(|| Error::contract("classify needs a non-empty path"))?;
    Ok(classify_state(z, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Architecture;
    use crate::model::series::tests::tiny_series;

    fn model() -> ModelParams {
        ModelParams::init(&Architecture::new(2), 0.3, 42)
    }

    #[test]
    fn encode_is_deterministic() {
        let (s, p) = (tiny_series(), model());
        assert_eq!(encode(&s, &p, 0.6).unwrap(), encode(&s, &p, 0.6).unwrap());
    }

    #[test]
    fn single_observation_respects_clamp() {
        let mut s = tiny_series();
        s.times = vec![0.3];
        s.values = vec![vec![2.0, 0.0]];
        s.mask = vec![vec![true, false]];
        // blow up the head so the clamp is exercised on both sides
        let mut p = model();
        let big: Vec<f64> = p.posterior_head.weight.data().iter().map(|w| w * 1e3).collect();
        p.posterior_head.weight = Tensor::new(p.posterior_head.weight.shape().to_vec(), big).unwrap();
        let post = encode(&s, &p, 1.0).unwrap();
        for sd in &post.std {
            assert!(*sd >= LOG_STD_MIN.exp() && *sd <= LOG_STD_MAX.exp());
        }
        assert!(post.std.iter().any(|s| *s == LOG_STD_MIN.exp() || *s == LOG_STD_MAX.exp()));
    }

    #[test]
    fn empty_window_error() {
        let s = tiny_series();
        assert_eq!(encode(&s, &model(), 0.05).unwrap_err(), Error::EmptyWindow { fraction: 0.05 });
        assert!(matches!(encode(&s, &model(), 1.5), Err(Error::Contract(_))));
        assert!(matches!(encode(&s, &model(), 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_neutrality() {
        let s = tiny_series();
        let mut t = s.clone();
        t.values[0][1] = 123.0;
        t.values[2][0] = f64::NAN;
        let p = model();
        assert_eq!(encode(&s, &p, 1.0).unwrap(), encode(&t, &p, 1.0).unwrap());
    }

    #[test]
    fn sampling() {
        let post = LatentPosterior::point_mass(vec![0.5, -1.0, 2.0]);
        assert_eq!(sample_z0(&post, 9), post.mean);
        let post = LatentPosterior::new(vec![0.0; 3], vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(sample_z0(&post, 17), sample_z0(&post, 17));
        assert_ne!(sample_z0(&post, 17), sample_z0(&post, 18));
    }

    #[test]
    fn evolve_identity_and_zero_dynamics() {
        let p = model();
        let z0: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let path = evolve(&z0, &[0.1, 0.2], &[0.0], &p, Tolerances::SERVING).unwrap();
        assert_eq!(path.states, vec![z0.clone()]);

        let zero = ModelParams::zeros(&Architecture::new(2), 0.3);
        let path = evolve(&z0, &[0.1, 0.2], &[0.0, 0.5, 3.0], &zero, Tolerances::SERVING).unwrap();
        assert!(path.states.iter().all(|s| s == &z0));
    }

    #[test]
    fn decode_and_classify_zero_weights() {
        let mut p = ModelParams::zeros(&Architecture::new(2), 0.3);
        let last = p.decoder.layers.last_mut().unwrap();
        last.bias = Tensor::vector(vec![0.7, -0.2]).unwrap();
        let path = LatentPath { times: vec![0.0, 0.5, 1.0], states: vec![vec![0.3; 16]; 3] };
        let rec = decode(&path, &p, -1.0);
        assert!(rec.means.iter().all(|m| m == &vec![0.7, -0.2]));
        assert_eq!(rec.observed_flag, vec![false; 3]);
        assert_eq!(decode(&path, &p, 0.5).observed_flag, vec![true, true, false]);
        assert_eq!(classify(&path, &p).unwrap(), 0.5);
    }

    #[test]
    fn classify_in_open_unit_interval() {
        let p = model();
        for scale in [-50.0, -1.0, 0.0, 1.0, 50.0] {
            let path = LatentPath { times: vec![1.0], states: vec![vec![scale; 16]] };
            let prob = classify(&path, &p).unwrap();
            assert!(prob > 0.0 && prob < 1.0, "{}", prob);
        }
        assert!(classify(&LatentPath { times: vec![], states: vec![] }, &p).is_err());
    }
}
