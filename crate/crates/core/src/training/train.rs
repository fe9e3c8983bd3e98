use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo, elbo_with_grad, ElboConfig, GradientPath};
use super::optim::{clip_global_norm, Adam};
use crate::checkpoint::Checkpoint;
use crate::data::{normalize_with_train, split};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::{Architecture, IrregularSeries, ModelParams};
use crate::odeint::Tolerances;

pub const FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// KL weight rises linearly from 0 (first epoch) to 1 over this many
    /// epochs; 0 means full weight from the start.
    pub kl_warmup_epochs: usize,
    pub classifier_weight: f64,
    pub obs_noise: f64,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    /// Stop after this many epochs without a better validation loss.
    pub patience: usize,
    pub validation_share: f64,
    pub grad_clip: f64,
    /// Use fixed-step RK4 backprop with this step instead of the adjoint.
    pub direct_rk4_step: Option<f64>,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub noise_dim: usize,
    pub dynamics_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = Architecture::new(1);
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 5e-3,
            kl_warmup_epochs: 10,
            classifier_weight: 1.0,
            obs_noise: 0.3,
            seed: 0,
            rtol: Tolerances::TRAINING.rtol,
            atol: Tolerances::TRAINING.atol,
            patience: 20,
            validation_share: 0.2,
            grad_clip: 10.0,
            direct_rk4_step: None,
            latent_dim: a.latent_dim,
            encoder_hidden: a.encoder_hidden,
            noise_dim: a.noise_dim,
            dynamics_hidden: a.dynamics_hidden,
            decoder_hidden: a.decoder_hidden,
            classifier_hidden: a.classifier_hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("obs_noise", self.obs_noise),
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("grad_clip", self.grad_clip),
        ];
        for (field, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::validation("learning_rate", "must be non-negative"));
        }
        if !(self.classifier_weight >= 0.0) {
            return Err(Error::validation("classifier_weight", "must be non-negative"));
        }
        if !(self.validation_share > 0.0 && self.validation_share < 1.0) {
            return Err(Error::validation("validation_share", "must lie in (0, 1)"));
        }
        if let Some(h) = self.direct_rk4_step {
            if !(h > 0.0) {
                return Err(Error::validation("direct_rk4_step", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self, n_features: usize) -> Architecture {
        Architecture {
            n_features,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden,
            noise_dim: self.noise_dim,
            dynamics_hidden: self.dynamics_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
        }
    }

    /// KL weight for a 1-based epoch.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch.saturating_sub(1)) as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances::new(self.rtol, self.atol)
    }

    fn gradient_path(&self) -> GradientPath {
        match self.direct_rk4_step {
            Some(step) => GradientPath::DirectRk4 { step },
            None => GradientPath::Adjoint,
        }
    }
}

/// One line of the training log. Losses are negative ELBO per series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub kl_weight: f64,
    pub train_loss: f64,
    pub train_mse: f64,
    pub validation_loss: f64,
    pub validation_mse: f64,
    pub validation_auc: Option<f64>,
    pub validation_failures: usize,
    pub aborted_batches: usize,
    pub total_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
    pub checkpoint_hash: String,
}

impl TrainReport {
    /// The epoch records as JSON lines.
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Smallest fraction ≥ `fraction` whose prefix holds an observation.
fn usable_fraction(series: &IrregularSeries, fraction: f64) -> f64 {
    FRACTIONS
        .iter()
        .copied()
        .filter(|f| *f >= fraction)
        .find(|f| !series.observed_rows(*f).is_empty())
        .unwrap_or(1.0)
}

fn validation_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(0x5151)
}

/// Negative ELBO, MSE and AUC over `set` at full fraction and KL weight 1.
fn validate_set(set: &[IrregularSeries], params: &ModelParams, cfg: &TrainConfig) -> (f64, f64, Option<f64>, usize) {
    let ecfg = ElboConfig {
        kl_weight: 1.0,
        classifier_weight: cfg.classifier_weight,
        tol: cfg.tolerances(),
        path: GradientPath::Adjoint,
    };
    let results: Vec<_> =
        set.par_iter().enumerate().map(|(i, s)| elbo(s, params, 1.0, validation_seed(cfg.seed, i), &ecfg)).collect();
    let (mut loss, mut sse, mut n_obs, mut failures) = (0.0, 0.0, 0usize, 0);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut n_ok = 0;
    for (s, r) in set.iter().zip(results) {
        match r {
            Ok(p) => {
                loss += p.loss;
                sse += p.sse;
                n_obs += p.n_observed;
                n_ok += 1;
                if let Some(l) = s.label {
                    probs.push(p.probability);
                    labels.push(l);
                }
            }
            Err(_) => failures += 1,
        }
    }
    let loss = if n_ok > 0 { loss / n_ok as f64 } else { f64::INFINITY };
    let mse = if n_obs > 0 { sse / n_obs as f64 } else { f64::INFINITY };
    (loss, mse, auc(&probs, &labels), failures)
}

/// Trains on `dataset` (raw or normalized series; statistics are refitted on
/// the training split) and returns the best-validation checkpoint.
pub fn train(dataset: &[IrregularSeries], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(dataset, config, |_| {})
}

/// [`train`], calling `on_epoch` after each completed epoch.
pub fn train_with_callback(
    dataset: &[IrregularSeries],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let (train_raw, val_raw) = split(dataset, config.validation_share, config.seed)?;
    if train_raw.is_empty() || val_raw.is_empty() {
        return Err(Error::validation("dataset", "too few series for a train/validation split"));
    }
    let (stats, train_set, others) = normalize_with_train(&train_raw, &[&val_raw])?;
    let val_set = &others[0];

    let arch = config.architecture(stats.n_features());
    arch.validate()?;
    let mut params = ModelParams::init(&arch, config.obs_noise, config.seed);
    let mut flat = params.flat();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7452_4149_4e00);

    for epoch in 1..=config.epochs {
        let kl_weight = config.kl_weight(epoch);
        let ecfg = ElboConfig {
            kl_weight,
            classifier_weight: config.classifier_weight,
            tol: config.tolerances(),
            path: config.gradient_path(),
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let total_batches = batches.len();
        let (mut aborted, mut loss_sum, mut sse, mut n_obs, mut n_done) = (0, 0.0, 0.0, 0usize, 0usize);

        for batch in batches {
            let jobs: Vec<(usize, f64, u64)> = batch
                .iter()
                .map(|&i| {
                    let drawn = FRACTIONS[rng.random_range(0..FRACTIONS.len())];
                    (i, usable_fraction(&train_set[i], drawn), rng.random::<u64>())
                })
                .collect();
            let results: Vec<Result<_>> = jobs
                .par_iter()
                .map(|&(i, fraction, seed)| elbo_with_grad(&train_set[i], &params, fraction, seed, &ecfg))
                .collect();
            let mut grad = vec![0.0; flat.len()];
            let mut failed = false;
            let mut batch_parts = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok((parts, g)) => {
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                        batch_parts.push(parts);
                    }
                    Err(e) if e.is_solver_failure() => failed = true,
                    Err(e) => return Err(e),
                }
            }
            if failed {
                aborted += 1;
                continue;
            }
            for p in &batch_parts {
                loss_sum += p.loss;
                sse += p.sse;
                n_obs += p.n_observed;
                n_done += 1;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            clip_global_norm(&mut grad, config.grad_clip);
            if config.learning_rate > 0.0 {
                adam.step(&mut flat, &grad);
                params = params.with_flat(&flat)?;
            }
        }
        if aborted * 4 > total_batches {
            return Err(Error::TrainingInstability { epoch, aborted, total: total_batches });
        }

        let (validation_loss, validation_mse, validation_auc, validation_failures) =
            validate_set(val_set, &params, config);
        let record = EpochRecord {
            epoch,
            kl_weight,
            train_loss: if n_done > 0 { loss_sum / n_done as f64 } else { f64::NAN },
            train_mse: if n_obs > 0 { sse / n_obs as f64 } else { f64::NAN },
            validation_loss,
            validation_mse,
            validation_auc,
            validation_failures,
            aborted_batches: aborted,
            total_batches,
        };
        on_epoch(&record);
        records.push(record);
        if validation_loss < best.0 {
            best = (validation_loss, epoch, params.clone());
        } else if config.patience > 0 && epoch - best.1 >= config.patience {
            break;
        }
    }

    // with no finite validation loss at all, keep the last parameters
    let (best_epoch, best_params) = if best.0.is_finite() { (best.1, best.2) } else { (records.len(), params) };
    let mut checkpoint = Checkpoint::new(best_params, stats);
    checkpoint.metadata.insert("seed".into(), config.seed.to_string());
    checkpoint.metadata.insert("best_epoch".into(), best_epoch.to_string());
    let report = TrainReport {
        epochs: records,
        best_epoch,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint_hash: checkpoint.hash(),
    };
    Ok(TrainOutcome { checkpoint, report })
}
