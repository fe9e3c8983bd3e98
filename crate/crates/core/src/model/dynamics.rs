use super::params::Mlp;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::odeint::{Dynamics, VjpDynamics};

/// `dz/dt = f(z, ε)`: the dynamics network fed the latent state and a noise
/// channel that is held constant along one trajectory. Autonomous in time.
pub struct LatentDynamics<'a> {
    net: &'a Mlp,
    noise: &'a [f64],
    latent_dim: usize,
}

impl<'a> LatentDynamics<'a> {
    pub fn new(net: &'a Mlp, noise: &'a [f64]) -> Result<Self> {
        let latent_dim = net.output_dim();
        let input = net.layers.first().map(|l| l.input_dim()).unwrap_or(0);
        if input != latent_dim + noise.len() {
            return Err(Error::contract(format!(
                "dynamics net takes {} inputs but latent {} + noise {} given",
                input,
                latent_dim,
                noise.len()
            )));
        }
        Ok(LatentDynamics { net, noise, latent_dim })
    }

    fn input(&self, y: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + self.noise.len());
        x.extend_from_slice(y);
        x.extend_from_slice(self.noise);
        x
    }
}

impl Dynamics for LatentDynamics<'_> {
    fn dim(&self) -> usize {
        self.latent_dim
    }

    fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        let out = self.net.forward(&self.input(y));
        dydt.copy_from_slice(&out);
        Ok(())
    }
}

impl VjpDynamics for LatentDynamics<'_> {
    fn n_params(&self) -> usize {
        self.net.tensors().map(|t| t.numel()).sum()
    }

    fn vjp(&self, _t: f64, y: &[f64], a: &[f64], grad_y: &mut [f64], grad_params: &mut [f64]) -> Result<()> {
        let mut grad_in = vec![0.0; y.len() + self.noise.len()];
        self.net.vjp(&self.input(y), a, &mut grad_in, grad_params);
        grad_y.copy_from_slice(&grad_in[..y.len()]);
        Ok(())
    }
}

impl LatentDynamics<'_> {
    /// The same product as [`VjpDynamics::vjp`], recorded on a tape and
    /// differentiated by the autodiff module.
    pub fn vjp_on_tape(&self, y: &[f64], a: &[f64], grad_y: &mut [f64], grad_params: &mut [f64]) -> Result<()> {
        let tape = Tape::new();
        let params: Vec<_> = self.net.tensors().map(|t| tape.param(t.clone())).collect();
        let z = tape.param(Tensor::vector(y.to_vec())?);
        let eps = tape.constant(Tensor::vector(self.noise.to_vec())?);
        let mut cur = tape.concat(&[z, eps])?;
        let n_layers = params.len() / 2;
        for i in 0..n_layers {
            cur = tape.affine(params[2 * i], cur, params[2 * i + 1])?;
            if i + 1 != n_layers {
                cur = tape.tanh(cur)?;
            }
        }
        let out = tape.dot_const(a, cur)?;
        let grads = tape.backward(out)?;
        grad_y.copy_from_slice(grads.wrt(z));
        let mut off = 0;
        for p in params {
            let g = grads.wrt(p);
            grad_params[off..off + g.len()].copy_from_slice(g);
            off += g.len();
        }
        Ok(())
    }
}
