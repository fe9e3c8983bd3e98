use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Everything needed to rebuild the weight shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_features: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub noise_dim: usize,
    pub dynamics_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(n_features: usize) -> Self {
        Architecture {
            n_features,
            latent_dim: 16,
            encoder_hidden: 32,
            noise_dim: 2,
            dynamics_hidden: vec![64, 64],
            decoder_hidden: vec![64],
            classifier_hidden: vec![32],
        }
    }

    /// Encoder input per observation: masked values, mask, time gap.
    pub fn encoder_input(&self) -> usize {
        2 * self.n_features + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_features, self.latent_dim, self.encoder_hidden];
        let hidden = self.dynamics_hidden.iter().chain(&self.decoder_hidden).chain(&self.classifier_hidden);
        if dims.iter().chain(hidden).any(|d| *d == 0) {
            return Err(Error::contract("architecture dimensions must be positive"));
        }
        Ok(())
    }
}

/// `y = W·x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::zeros(&[output, input]), bias: Tensor::zeros(&[output]) }
    }

    /// Glorot-normal weights scaled by `gain`, zero bias.
    fn init(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let sd = gain * (2.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        Linear { weight: Tensor::matrix(output, input, w).expect("finite init"), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let (w, b) = (self.weight.data(), self.bias.data());
        let k = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                acc += row[j] * x[j];
            }
            *o = acc + b[r];
        }
    }
}

/// Tanh multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn build(input: usize, hidden: &[usize], output: usize, mut make: impl FnMut(usize, usize, bool) -> Linear) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let layers = (0..n).map(|i| make(dims[i], dims[i + 1], i + 1 == n)).collect();
        Mlp { layers }
    }

    pub fn zeros(input: usize, hidden: &[usize], output: usize) -> Self {
        Mlp::build(input, hidden, output, |i, o, _| Linear::zeros(i, o))
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.output_dim()];
            layer.forward_into(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
        }
        cur
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    /// Vector-Jacobian product `aᵀ·∂f/∂x` and `aᵀ·∂f/∂θ` by a hand-rolled
    /// backward pass; `grad_params` follows [`Mlp::tensors`] order. Agrees
    /// with the same network recorded on a tape.
    pub fn vjp(&self, x: &[f64], a: &[f64], grad_x: &mut [f64], grad_params: &mut [f64]) {
        let last = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.output_dim()];
            layer.forward_into(&acts[i], &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weight.numel() + l.bias.numel();
        }
        let mut g = a.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                for (gj, h) in g.iter_mut().zip(&acts[i + 1]) {
                    *gj *= 1.0 - h * h;
                }
            }
            let input = &acts[i];
            let (n_in, n_out) = (layer.input_dim(), layer.output_dim());
            let gw = &mut grad_params[offsets[i]..offsets[i] + n_in * n_out];
            for r in 0..n_out {
                let row = &mut gw[r * n_in..(r + 1) * n_in];
                for j in 0..n_in {
                    row[j] = g[r] * input[j];
                }
            }
            let b0 = offsets[i] + n_in * n_out;
            grad_params[b0..b0 + n_out].copy_from_slice(&g);
            let w = layer.weight.data();
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                for j in 0..n_in {
                    prev[j] += row[j] * g[r];
                }
            }
            g = prev;
        }
        grad_x.copy_from_slice(&g);
    }
}

/// Gated recurrent cell: update, reset and candidate maps over `[x ; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

impl GruCell {
    pub fn hidden(&self) -> usize {
        self.update.output_dim()
    }
}

/// All trainable weights plus the fixed observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub encoder: GruCell,
    pub posterior_head: Linear,
    pub dynamics: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
    /// Per-feature observation std in normalized units.
    pub obs_noise: Vec<f64>,
}

/// Blocks of the flat parameter vector, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Encoder,
    PosteriorHead,
    Dynamics,
    Decoder,
    Classifier,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture, obs_noise: f64) -> Self {
        let (f, l, h) = (arch.n_features, arch.latent_dim, arch.encoder_hidden);
        let gin = arch.encoder_input() + h;
        ModelParams {
            arch: arch.clone(),
            encoder: GruCell { update: Linear::zeros(gin, h), reset: Linear::zeros(gin, h), candidate: Linear::zeros(gin, h) },
            posterior_head: Linear::zeros(h, 2 * l),
            dynamics: Mlp::zeros(l + arch.noise_dim, &arch.dynamics_hidden, l),
            decoder: Mlp::zeros(l, &arch.decoder_hidden, f),
            classifier: Mlp::zeros(l, &arch.classifier_hidden, 1),
            obs_noise: vec![obs_noise; f],
        }
    }

    /// Random initialization. The last dynamics layer starts small so the
    /// initial flow is gentle.
    pub fn init(arch: &Architecture, obs_noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, l, h) = (arch.n_features, arch.latent_dim, arch.encoder_hidden);
        let gin = arch.encoder_input() + h;
        let encoder = GruCell {
            update: Linear::init(gin, h, 1.0, &mut rng),
            reset: Linear::init(gin, h, 1.0, &mut rng),
            candidate: Linear::init(gin, h, 1.0, &mut rng),
        };
        let posterior_head = Linear::init(h, 2 * l, 1.0, &mut rng);
        let dynamics = Mlp::build(l + arch.noise_dim, &arch.dynamics_hidden, l, |i, o, last| {
            Linear::init(i, o, if last { 0.1 } else { 1.0 }, &mut rng)
        });
        let decoder = Mlp::build(l, &arch.decoder_hidden, f, |i, o, _| Linear::init(i, o, 1.0, &mut rng));
        let classifier = Mlp::build(l, &arch.classifier_hidden, 1, |i, o, _| Linear::init(i, o, 1.0, &mut rng));
        ModelParams { arch: arch.clone(), encoder, posterior_head, dynamics, decoder, classifier, obs_noise: vec![obs_noise; f] }
    }

    fn linears(&self) -> Vec<(Section, String, &Linear)> {
        let mut out = vec![
            (Section::Encoder, "encoder.update".to_string(), &self.encoder.update),
            (Section::Encoder, "encoder.reset".to_string(), &self.encoder.reset),
            (Section::Encoder, "encoder.candidate".to_string(), &self.encoder.candidate),
            (Section::PosteriorHead, "posterior_head".to_string(), &self.posterior_head),
        ];
        let mlps = [
            (Section::Dynamics, "dynamics", &self.dynamics),
            (Section::Decoder, "decoder", &self.decoder),
            (Section::Classifier, "classifier", &self.classifier),
        ];
        for (sec, name, mlp) in mlps {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((sec, format!("{}.{}", name, i), l));
            }
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.encoder.update, &mut self.encoder.reset, &mut self.encoder.candidate, &mut self.posterior_head];
        out.extend(self.dynamics.layers.iter_mut());
        out.extend(self.decoder.layers.iter_mut());
        out.extend(self.classifier.layers.iter_mut());
        out
    }

    /// Trainable tensors with stable names, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.linears()
            .into_iter()
            .flat_map(|(_, name, l)| [(format!("{}.weight", name), &l.weight), (format!("{}.bias", name), &l.bias)])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn section_range(&self, section: Section) -> Range<usize> {
        let mut start = None;
        let mut offset = 0;
        for (sec, _, l) in self.linears() {
            let n = l.weight.numel() + l.bias.numel();
            if sec == section && start.is_none() {
                start = Some(offset);
            }
            if let (true, Some(s)) = (sec != section, start) {
                return s..offset;
            }
            offset += n;
        }
        start.unwrap_or(offset)..offset
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of these parameters with trainable values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in out.linears_mut() {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.numel();
                *t = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?;
                off += n;
            }
        }
        Ok(out)
    }

    /// Rebuilds parameters from named tensors (as read from a checkpoint).
    pub fn from_named(arch: &Architecture, obs_noise: Vec<f64>, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        arch.validate()?;
        let mut out = ModelParams::zeros(arch, 1.0);
        if obs_noise.len() != arch.n_features || obs_noise.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::contract("obs_noise must be positive, one entry per feature"));
        }
        out.obs_noise = obs_noise;
        let names: Vec<String> = out.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut flat = Vec::with_capacity(out.param_count());
        for (name, (_, expected)) in names.iter().zip(out.named_tensors()) {
            let t = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))?;
            if t.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, architecture wants {:?}",
                    name,
                    t.shape(),
                    expected.shape()
                )));
            }
            flat.extend_from_slice(t.data());
        }
        out.with_flat(&flat)
    }

    /// Registers every trainable tensor on `tape`, as differentiable leaves
    /// when `trainable` is set and as constants otherwise.
    pub fn register(&self, tape: &Tape, trainable: bool) -> ModelVars {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let lin = |l: &Linear| LinearVars { weight: reg(&l.weight), bias: reg(&l.bias) };
        let mlp = |m: &Mlp| MlpVars { layers: m.layers.iter().map(lin).collect() };
        ModelVars {
            encoder: GruVars { update: lin(&self.encoder.update), reset: lin(&self.encoder.reset), candidate: lin(&self.encoder.candidate) },
            posterior_head: lin(&self.posterior_head),
            dynamics: mlp(&self.dynamics),
            decoder: mlp(&self.decoder),
            classifier: mlp(&self.classifier),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.affine(self.weight, x, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.apply(tape, cur)?;
            if i != last {
                cur = tape.tanh(cur)?;
            }
        }
        Ok(cur)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub update: LinearVars,
    pub reset: LinearVars,
    pub candidate: LinearVars,
}

impl GruVars {
    /// One recurrent step: `h' = n + z ⊙ (h − n)`.
    pub fn step(&self, tape: &Tape, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat(&[x, h])?;
        let z = tape.sigmoid(self.update.apply(tape, xh)?)?;
        let r = tape.sigmoid(self.reset.apply(tape, xh)?)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh])?;
        let n = tape.tanh(self.candidate.apply(tape, xrh)?)?;
        let diff = tape.sub(h, n)?;
        let gated = tape.mul(z, diff)?;
        tape.add(n, gated)
    }
}

/// Tape handles for every trainable tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: GruVars,
    pub posterior_head: LinearVars,
    pub dynamics: MlpVars,
    pub decoder: MlpVars,
    pub classifier: MlpVars,
}

impl ModelVars {
    /// Handles in the same order as [`ModelParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let lin = |l: &LinearVars| [l.weight, l.bias];
        let mut out = Vec::new();
        for l in [&self.encoder.update, &self.encoder.reset, &self.encoder.candidate, &self.posterior_head] {
            out.extend(lin(l));
        }
        out.extend(self.dynamics.vars());
        out.extend(self.decoder.vars());
        out.extend(self.classifier.vars());
        out
    }
}
