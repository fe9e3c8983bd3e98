//! Integration of first-order ODE systems, with gradients through the
//! solution by the adjoint method.

mod adjoint;
mod dopri5;
mod rk4;

pub use adjoint::{adjoint_backward, adjoint_gradients, AdjointGradients};
pub use dopri5::{dopri5_integrate, Dopri5};
pub use rk4::rk4_integrate;

use crate::error::{Error, Result};

/// Right-hand side `dy/dt = f(t, y)`.
///
/// Implementations must be re-entrant: solvers may call them from several
/// threads when many problems run side by side.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()>;
}

/// Dynamics that can also produce vector-Jacobian products, as needed by the
/// adjoint sweep.
pub trait VjpDynamics: Dynamics {
    fn n_params(&self) -> usize;

    /// Writes `aᵀ ∂f/∂y` into `grad_y` and `aᵀ ∂f/∂θ` into `grad_params`.
    fn vjp(&self, t: f64, y: &[f64], a: &[f64], grad_y: &mut [f64], grad_params: &mut [f64]) -> Result<()>;
}

impl<D: Dynamics + ?Sized> Dynamics for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        (**self).eval(t, y, dydt)
    }
}

impl<D: VjpDynamics + ?Sized> VjpDynamics for &D {
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn vjp(&self, t: f64, y: &[f64], a: &[f64], gy: &mut [f64], gp: &mut [f64]) -> Result<()> {
        (**self).vjp(t, y, a, gy, gp)
    }
}

/// Wraps a closure as [`Dynamics`].
pub struct FnDynamics<F> {
    dim: usize,
    f: F,
}

impl<F> FnDynamics<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnDynamics { dim, f }
    }
}

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        (self.f)(t, y, dydt);
        Ok(())
    }
}

/// Initial value problem with the times at which the solution is wanted.
///
/// `eval_times` lie in the closed span and are ordered in the direction of
/// integration; repeated times are allowed. A span with `t_end < t_start`
/// integrates backwards.
pub struct OdeProblem<D> {
    pub dynamics: D,
    pub y0: Vec<f64>,
    pub t_span: (f64, f64),
    pub eval_times: Vec<f64>,
}

impl<D: Dynamics> OdeProblem<D> {
    pub fn new(dynamics: D, y0: Vec<f64>, t_span: (f64, f64), eval_times: Vec<f64>) -> Result<Self> {
        let (t0, t1) = t_span;
        if !t0.is_finite() || !t1.is_finite() {
            return Err(Error::contract("time span must be finite"));
        }
        if dynamics.dim() != y0.len() {
            return Err(Error::contract(format!(
                "dynamics has dimension {} but y0 has {}",
                dynamics.dim(),
                y0.len()
            )));
        }
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite initial state".into()));
        }
        let dir = if t1 >= t0 { 1.0 } else { -1.0 };
        let (lo, hi) = if t1 >= t0 { (t0, t1) } else { (t1, t0) };
        for (i, t) in eval_times.iter().enumerate() {
            if !(lo..=hi).contains(t) {
                return Err(Error::contract(format!("eval time {} outside span [{}, {}]", t, lo, hi)));
            }
            if i > 0 && (t - eval_times[i - 1]) * dir < 0.0 {
                return Err(Error::contract("eval times are not ordered in the direction of integration"));
            }
        }
        Ok(OdeProblem { dynamics, y0, t_span, eval_times })
    }

    pub(crate) fn direction(&self) -> f64 {
        if self.t_span.1 >= self.t_span.0 {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolverStats,
    /// Step size (magnitude) the adaptive controller proposed after its
    /// last accepted step.
    pub next_step: Option<f64>,
}

/// Relative/absolute tolerance pair for the adaptive solver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerances {
    pub const TRAINING: Tolerances = Tolerances { rtol: 1e-6, atol: 1e-8 };
    pub const SERVING: Tolerances = Tolerances { rtol: 1e-7, atol: 1e-8 };

    pub fn new(rtol: f64, atol: f64) -> Self {
        Tolerances { rtol, atol }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances::TRAINING
    }
}

pub(crate) fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { time: t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_validation() {
        let f = FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = -y[0]);
        assert!(OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![0.5, 1.0]).is_ok());
        assert!(OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![1.5]).is_err());
        assert!(OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![0.7, 0.2]).is_err());
        assert!(OdeProblem::new(&f, vec![1.0, 2.0], (0.0, 1.0), vec![]).is_err());
        // reversed span wants decreasing eval times
        assert!(OdeProblem::new(&f, vec![1.0], (1.0, 0.0), vec![0.7, 0.2]).is_ok());
        assert!(OdeProblem::new(&f, vec![1.0], (1.0, 0.0), vec![0.2, 0.7]).is_err());
    }
}
