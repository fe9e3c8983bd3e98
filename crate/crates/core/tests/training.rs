use latode::data::{gen_icu, gen_spirals, IcuGenConfig, SpiralConfig};
use latode::model::{Architecture, IrregularSeries, ModelParams, Section};
use latode::odeint::Tolerances;
use latode::training::{elbo_with_grad, train, ElboConfig, GradientPath, TrainConfig};

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn batch_grad(batch: &[IrregularSeries], p: &ModelParams, path: GradientPath) -> Vec<f64> {
    let cfg = ElboConfig { kl_weight: 0.7, classifier_weight: 1.0, tol: Tolerances::new(1e-10, 1e-12), path };
    let mut total = vec![0.0; p.param_count()];
    for (i, s) in batch.iter().enumerate() {
        let fraction = [0.6, 1.0, 0.8, 1.0][i % 4];
        let (_, g) = elbo_with_grad(s, p, fraction, 100 + i as u64, &cfg).unwrap();
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    total
}

#[test]
fn adjoint_and_direct_backprop_agree_on_a_fixed_batch() {
    let raw = gen_icu(&IcuGenConfig { n_patients: 4, seed: 5, ..IcuGenConfig::default() }).unwrap();
    let p = ModelParams::init(&Architecture::new(4), 0.3, 9);
    let adjoint = batch_grad(&raw, &p, GradientPath::Adjoint);
    let direct = batch_grad(&raw, &p, GradientPath::DirectRk4 { step: 0.002 });
    let r = rel(&adjoint, &direct);
    assert!(r <= 1e-3, "overall relative difference {:e}", r);
    for section in [Section::Encoder, Section::PosteriorHead, Section::Dynamics, Section::Decoder, Section::Classifier] {
        let range = p.section_range(section);
        let r = rel(&adjoint[range.clone()], &direct[range]);
        assert!(r <= 1e-3, "{:?}: relative difference {:e}", section, r);
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed,
        latent_dim: 4,
        encoder_hidden: 12,
        noise_dim: 2,
        dynamics_hidden: vec![16],
        decoder_hidden: vec![16],
        classifier_hidden: vec![8],
        ..TrainConfig::default()
    }
}

fn spirals(n: usize, seed: u64) -> Vec<IrregularSeries> {
    gen_spirals(&SpiralConfig { n_series: n, points_per_series: 15, seed, ..SpiralConfig::default() }).unwrap()
}

#[test]
fn zero_learning_rate_returns_the_initialization() {
    let data = spirals(10, 1);
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..small_config(4) };
    let out = train(&data, &cfg).unwrap();
    let init = ModelParams::init(&cfg.architecture(2), cfg.obs_noise, cfg.seed);
    assert_eq!(out.checkpoint.params, init);
}

#[test]
fn training_is_seeded() {
    let data = spirals(10, 2);
    let cfg = small_config(7);
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.report.checkpoint_hash, b.report.checkpoint_hash);
    let c = train(&data, &small_config(8)).unwrap();
    assert_ne!(c.checkpoint.hash(), a.checkpoint.hash());
}

#[test]
fn kl_weight_schedule() {
    let cfg = TrainConfig { kl_warmup_epochs: 4, ..TrainConfig::default() };
    let w: Vec<f64> = (1..=6).map(|e| cfg.kl_weight(e)).collect();
    assert_eq!(w, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    assert_eq!(TrainConfig { kl_warmup_epochs: 0, ..cfg }.kl_weight(1), 1.0);
}

#[test]
fn a_few_epochs_lower_the_validation_loss() {
    let mut improved = 0;
    for seed in 0..5 {
        let data = spirals(40, 10 + seed);
        let cfg = TrainConfig { epochs: 6, kl_warmup_epochs: 0, learning_rate: 1e-2, ..small_config(seed) };
        let out = train(&data, &cfg).unwrap();
        let e = &out.report.epochs;
        assert!(e.iter().all(|r| r.aborted_batches == 0));
        if e.last().unwrap().validation_loss < e[0].validation_loss {
            improved += 1;
        }
    }
    assert!(improved >= 4, "validation loss fell in only {} of 5 runs", improved);
}

#[test]
fn invalid_configuration_is_rejected() {
    let data = spirals(10, 3);
    for cfg in [
        TrainConfig { batch_size: 0, ..small_config(0) },
        TrainConfig { learning_rate: -1.0, ..small_config(0) },
        TrainConfig { validation_share: 1.0, ..small_config(0) },
    ] {
        assert!(matches!(train(&data, &cfg), Err(latode::Error::Validation { .. })));
    }
    let toml_text = "epochs = 2\nbogus = 1\n";
    assert!(toml::from_str::<TrainConfig>(toml_text).is_err());
}
