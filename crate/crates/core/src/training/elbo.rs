use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{encode_on_tape, standard_normals, LatentDynamics, ModelParams, ModelVars, Section, IrregularSeries};
use crate::odeint::{adjoint_backward, Dopri5, OdeProblem, Tolerances};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How gradients reach the dynamics weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GradientPath {
    /// Dopri5 forward, augmented adjoint system backward.
    Adjoint,
    /// Every RK4 stage recorded on one tape and differentiated directly.
    DirectRk4 { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboConfig {
    pub kl_weight: f64,
    pub classifier_weight: f64,
    pub tol: Tolerances,
    pub path: GradientPath,
}

impl Default for ElboConfig {
    fn default() -> Self {
        ElboConfig { kl_weight: 1.0, classifier_weight: 1.0, tol: Tolerances::TRAINING, path: GradientPath::Adjoint }
    }
}

/// Loss and its pieces for one series. `loss = −recon_log_lik + kl_weight·kl
/// + classifier_weight·class_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub loss: f64,
    pub recon_log_lik: f64,
    pub kl: f64,
    /// Binary cross-entropy; 0 for unlabeled series.
    pub class_loss: f64,
    /// Squared reconstruction error summed over observed entries.
    pub sse: f64,
    pub n_observed: usize,
    /// Outcome probability read at the end of the encoded prefix.
    pub probability: f64,
}

/// Union of the observed times and the prefix end, plus where each lands.
struct Grid {
    times: Vec<f64>,
    /// `(row, grid index)` for every row with an observation.
    rows: Vec<(usize, usize)>,
    prefix_idx: usize,
}

impl Grid {
    fn build(series: &IrregularSeries, fraction: f64) -> Grid {
        let observed: Vec<usize> = (0..series.len()).filter(|&r| series.mask[r].iter().any(|m| *m)).collect();
        let mut times: Vec<f64> = observed.iter().map(|&r| series.times[r]).collect();
        times.push(fraction);
        times.sort_by(f64::total_cmp);
        times.dedup();
        let idx = |t: f64| times.iter().position(|&g| g == t).expect("time on grid");
        let rows = observed.iter().map(|&r| (r, idx(series.times[r]))).collect();
        let prefix_idx = idx(fraction);
        Grid { times, rows, prefix_idx }
    }
}

/// Draws `(ξ, ε)` for the reparameterized `z0` and the noise channel.
pub fn sample_noise(seed: u64, latent_dim: usize, noise_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = standard_normals(&mut rng, latent_dim);
    let eps = standard_normals(&mut rng, noise_dim);
    (xi, eps)
}

struct EncoderOut {
    z0: Var,
    kl: Var,
}

fn encoder_on_tape(
    tape: &Tape,
    vars: &ModelVars,
    params: &ModelParams,
    series: &IrregularSeries,
    fraction: f64,
    xi: &[f64],
) -> Result<EncoderOut> {
    let (mean, log_std) = encode_on_tape(tape, vars, params, series, fraction)?;
    let std = tape.exp(log_std)?;
    let xi = tape.constant(Tensor::vector(xi.to_vec())?);
    let z0 = tape.add(mean, tape.mul(std, xi)?)?;
    // KL(N(μ, σ²) ‖ N(0, 1)) without its constant −L/2
    let m2 = tape.sum(tape.mul(mean, mean)?)?;
    let var = tape.sum(tape.exp(tape.scale(log_std, 2.0)?)?)?;
    let quad = tape.scale(tape.add(m2, var)?, 0.5)?;
    let kl = tape.sub(quad, tape.sum(log_std)?)?;
    Ok(EncoderOut { z0, kl })
}

struct HeadsOut {
    /// Negative log-likelihood without the `ln σ + ln √2π` constants.
    nll: Var,
    bce: Option<Var>,
    sse: f64,
    probability: f64,
}

fn heads_on_tape(
    tape: &Tape,
    vars: &ModelVars,
    params: &ModelParams,
    series: &IrregularSeries,
    grid: &Grid,
    zs: &[Var],
) -> Result<HeadsOut> {
    let mut decoded: Vec<Option<Var>> = vec![None; zs.len()];
    let mut nll: Option<Var> = None;
    let mut sse = 0.0;
    for &(r, g) in &grid.rows {
        let xhat = match decoded[g] {
            Some(v) => v,
            None => {
                let v = vars.decoder.apply(tape, zs[g])?;
                decoded[g] = Some(v);
                v
            }
        };
        let x = tape.constant(Tensor::vector(series.masked_row(r))?);
        let diff = tape.sub(xhat, x)?;
        let sq = tape.mul(diff, diff)?;
        let coeffs: Vec<f64> = series.mask[r]
            .iter()
            .zip(&params.obs_noise)
            .map(|(m, s)| if *m { 0.5 / (s * s) } else { 0.0 })
            .collect();
        let term = tape.dot_const(&coeffs, sq)?;
        nll = Some(match nll {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        let d = tape.to_vec(diff);
        sse += d.iter().zip(&series.mask[r]).filter(|(_, m)| **m).map(|(d, _)| d * d).sum::<f64>();
    }
    let nll = nll.ok_or_else(|| Error::contract("series has no observed entries"))?;

    let logit = vars.classifier.apply(tape, zs[grid.prefix_idx])?;
    let probability = crate::autodiff::sigmoid(tape.scalar(logit));
    let bce = match series.label {
        Some(y) => {
            let y = if y { 1.0 } else { 0.0 };
            Some(tape.sub(tape.sum(tape.softplus(logit)?)?, tape.dot_const(&[y], logit)?)?)
        }
        None => None,
    };
    Ok(HeadsOut { nll, bce, sse, probability })
}

fn weighted_sum(tape: &Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = if w == 1.0 { v } else { tape.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::contract("empty loss"))
}

fn nll_constant(series: &IrregularSeries, params: &ModelParams) -> f64 {
    let mut c = 0.0;
    for row in &series.mask {
        for (m, s) in row.iter().zip(&params.obs_noise) {
            if *m {
                c += s.ln() + HALF_LN_2PI;
            }
        }
    }
    c
}

fn finish_parts(
    tape_nll: f64,
    tape_kl: f64,
    heads: &HeadsOut,
    bce: f64,
    series: &IrregularSeries,
    params: &ModelParams,
    cfg: &ElboConfig,
) -> ElboParts {
    let recon_log_lik = -(tape_nll + nll_constant(series, params));
    let kl = tape_kl - 0.5 * params.arch.latent_dim as f64;
    ElboParts {
        loss: -recon_log_lik + cfg.kl_weight * kl + cfg.classifier_weight * bce,
        recon_log_lik,
        kl,
        class_loss: bce,
        sse: heads.sse,
        n_observed: series.n_observed(),
        probability: heads.probability,
    }
}

/// Negative ELBO of one series, encoding the first `fraction` of the window
/// and scoring the reconstruction over the whole window.
pub fn elbo(series: &IrregularSeries, params: &ModelParams, fraction: f64, seed: u64, cfg: &ElboConfig) -> Result<ElboParts> {
    let (xi, eps) = sample_noise(seed, params.arch.latent_dim, params.arch.noise_dim);
    let grid = Grid::build(series, fraction);
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let enc = encoder_on_tape(&tape, &vars, params, series, fraction, &xi)?;
    let zs = match cfg.path {
        GradientPath::Adjoint => {
            let f = LatentDynamics::new(&params.dynamics, &eps)?;
            let t_end = *grid.times.last().expect("grid has the prefix end");
            let problem = OdeProblem::new(&f, tape.to_vec(enc.z0), (0.0, t_end), grid.times.clone())?;
            let sol = Dopri5::from(cfg.tol).solve(&problem)?;
            sol.states.into_iter().map(|s| Ok(tape.constant(Tensor::vector(s)?))).collect::<Result<Vec<_>>>()?
        }
        GradientPath::DirectRk4 { step } => rk4_on_tape(&tape, &vars, enc.z0, &eps, &grid.times, step)?,
    };
    let heads = heads_on_tape(&tape, &vars, params, series, &grid, &zs)?;
    let bce = heads.bce.map(|b| tape.scalar(b)).unwrap_or(0.0);
    Ok(finish_parts(tape.scalar(heads.nll), tape.scalar(enc.kl), &heads, bce, series, params, cfg))
}

/// [`elbo`] plus the gradient of `loss` with respect to every trainable
/// parameter, laid out like [`ModelParams::flat`].
pub fn elbo_with_grad(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    seed: u64,
    cfg: &ElboConfig,
) -> Result<(ElboParts, Vec<f64>)> {
    match cfg.path {
        GradientPath::Adjoint => adjoint_path(series, params, fraction, seed, cfg),
        GradientPath::DirectRk4 { step } => direct_path(series, params, fraction, seed, cfg, step),
    }
}

fn gather(grads: &crate::autodiff::Gradients, vars: &[Var], out: &mut [f64], range: std::ops::Range<usize>) {
    let mut off = 0;
    for &v in vars {
        let g = grads.wrt(v);
        if off >= range.start && off + g.len() <= range.end {
            out[off..off + g.len()].copy_from_slice(g);
        }
        off += g.len();
    }
}

fn adjoint_path(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    seed: u64,
    cfg: &ElboConfig,
) -> Result<(ElboParts, Vec<f64>)> {
    let (xi, eps) = sample_noise(seed, params.arch.latent_dim, params.arch.noise_dim);
    let grid = Grid::build(series, fraction);
    let mut flat = vec![0.0; params.param_count()];

    let enc_tape = Tape::new();
    let enc_vars = params.register(&enc_tape, true);
    let enc = encoder_on_tape(&enc_tape, &enc_vars, params, series, fraction, &xi)?;
    let z0 = enc_tape.to_vec(enc.z0);

    let f = LatentDynamics::new(&params.dynamics, &eps)?;
    let t_end = *grid.times.last().expect("grid has the prefix end");
    let problem = OdeProblem::new(&f, z0, (0.0, t_end), grid.times.clone())?;
    let forward = Dopri5::from(cfg.tol).solve(&problem)?;

    let head_tape = Tape::new();
    let head_vars = params.register(&head_tape, true);
    let zs: Vec<Var> =
        forward.states.iter().map(|s| Ok(head_tape.param(Tensor::vector(s.clone())?))).collect::<Result<_>>()?;
    let heads = heads_on_tape(&head_tape, &head_vars, params, series, &grid, &zs)?;
    let mut terms = vec![(heads.nll, 1.0)];
    if let Some(b) = heads.bce {
        terms.push((b, cfg.classifier_weight));
    }
    let head_loss = weighted_sum(&head_tape, &terms)?;
    let head_grads = head_tape.backward(head_loss)?;
    let loss_grads: Vec<Vec<f64>> = zs.iter().map(|z| head_grads.wrt(*z).to_vec()).collect();
    let all = head_vars.all();
    gather(&head_grads, &all, &mut flat, params.section_range(Section::Decoder));
    gather(&head_grads, &all, &mut flat, params.section_range(Section::Classifier));

    let adj = adjoint_backward(&problem, forward, &loss_grads, cfg.tol)?;
    flat[params.section_range(Section::Dynamics)].copy_from_slice(&adj.grad_params);

    let pull = enc_tape.dot_const(&adj.grad_y0, enc.z0)?;
    let enc_loss = weighted_sum(&enc_tape, &[(enc.kl, cfg.kl_weight), (pull, 1.0)])?;
    let enc_grads = enc_tape.backward(enc_loss)?;
    let all = enc_vars.all();
    gather(&enc_grads, &all, &mut flat, params.section_range(Section::Encoder));
    gather(&enc_grads, &all, &mut flat, params.section_range(Section::PosteriorHead));

    let bce = heads.bce.map(|b| head_tape.scalar(b)).unwrap_or(0.0);
    let parts = finish_parts(head_tape.scalar(heads.nll), enc_tape.scalar(enc.kl), &heads, bce, series, params, cfg);
    Ok((parts, flat))
}

/// Fixed-step RK4 through `times` from `t = 0`, every stage on `tape`.
fn rk4_on_tape(tape: &Tape, vars: &ModelVars, z0: Var, eps: &[f64], times: &[f64], step: f64) -> Result<Vec<Var>> {
    if !(step > 0.0) {
        return Err(Error::contract("rk4 step must be positive"));
    }
    let eps = tape.constant(Tensor::vector(eps.to_vec())?);
    let f = |z: Var| -> Result<Var> { vars.dynamics.apply(tape, tape.concat(&[z, eps])?) };
    let mut t = 0.0;
    let mut z = z0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while target - t > 1e-12 * target.abs().max(1.0) {
            let remaining = target - t;
            let last = remaining <= step * (1.0 + 1e-9);
            let h = if last { remaining } else { step };
            let k1 = f(z)?;
            let k2 = f(tape.add(z, tape.scale(k1, 0.5 * h)?)?)?;
            let k3 = f(tape.add(z, tape.scale(k2, 0.5 * h)?)?)?;
            let k4 = f(tape.add(z, tape.scale(k3, h)?)?)?;
            let mid = tape.add(k2, k3)?;
            let sum = tape.add(tape.add(k1, tape.scale(mid, 2.0)?)?, k4)?;
            z = tape.add(z, tape.scale(sum, h / 6.0)?)?;
            t = if last { target } else { t + h };
        }
        out.push(z);
    }
    Ok(out)
}

fn direct_path(
    series: &IrregularSeries,
    params: &ModelParams,
    fraction: f64,
    seed: u64,
    cfg: &ElboConfig,
    step: f64,
) -> Result<(ElboParts, Vec<f64>)> {
    let (xi, eps) = sample_noise(seed, params.arch.latent_dim, params.arch.noise_dim);
    let grid = Grid::build(series, fraction);
    let tape = Tape::new();
    let vars = params.register(&tape, true);
    let enc = encoder_on_tape(&tape, &vars, params, series, fraction, &xi)?;
    let zs = rk4_on_tape(&tape, &vars, enc.z0, &eps, &grid.times, step)?;
    let heads = heads_on_tape(&tape, &vars, params, series, &grid, &zs)?;
    let mut terms = vec![(heads.nll, 1.0), (enc.kl, cfg.kl_weight)];
    if let Some(b) = heads.bce {
        terms.push((b, cfg.classifier_weight));
    }
    let loss = weighted_sum(&tape, &terms)?;
    let grads = tape.backward(loss)?;
    let mut flat = vec![0.0; params.param_count()];
    gather(&grads, &vars.all(), &mut flat, 0..params.param_count());
    let bce = heads.bce.map(|b| tape.scalar(b)).unwrap_or(0.0);
    let parts = finish_parts(tape.scalar(heads.nll), tape.scalar(enc.kl), &heads, bce, series, params, cfg);
    Ok((parts, flat))
}
