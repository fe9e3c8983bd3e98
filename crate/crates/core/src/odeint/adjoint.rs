use super::{Dopri5, Dynamics, OdeProblem, OdeSolution, SolverStats, Tolerances, VjpDynamics};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdjointGradients {
    pub grad_y0: Vec<f64>,
    pub grad_params: Vec<f64>,
    /// The forward solution the gradients were computed around.
    pub forward: OdeSolution,
    pub backward_stats: SolverStats,
}

/// State, adjoint and parameter-adjoint integrated together backwards:
/// `y' = f`, `a' = -aᵀ ∂f/∂y`, `a_θ' = -aᵀ ∂f/∂θ`.
struct Augmented<'a, D> {
    f: &'a D,
    n: usize,
    p: usize,
}

impl<D: VjpDynamics> Dynamics for Augmented<'_, D> {
    fn dim(&self) -> usize {
        2 * self.n + self.p
    }

    fn eval(&self, t: f64, s: &[f64], ds: &mut [f64]) -> Result<()> {
        let n = self.n;
        let (y, rest) = s.split_at(n);
        let a = &rest[..n];
        let (dy, drest) = ds.split_at_mut(n);
        let (da, dp) = drest.split_at_mut(n);
        self.f.eval(t, y, dy)?;
        self.f.vjp(t, y, a, da, dp)?;
        for v in da.iter_mut().chain(dp.iter_mut()) {
            *v = -*v;
        }
        Ok(())
    }
}

/// Gradients of a loss that depends on the solution at `problem.eval_times`.
///
/// `loss_grads[i]` is `∂loss/∂y(t_i)`. The adjoint is swept from the last
/// eval time back to `t_start`, receiving each impulse as it passes the
/// corresponding time; the state component is reset to the forward solution
/// at every eval time to keep the backward reconstruction from drifting.
pub fn adjoint_gradients<D: VjpDynamics>(
    problem: &OdeProblem<D>,
    loss_grads: &[Vec<f64>],
    tol: Tolerances,
) -> Result<AdjointGradients> {
    check_loss_grads(problem.eval_times.len(), problem.y0.len(), loss_grads)?;
    let forward = Dopri5::from(tol).solve(problem)?;
    adjoint_backward(problem, forward, loss_grads, tol)
}

/// Backward sweep around an already computed forward solution of `problem`
/// (as returned by [`Dopri5::solve`]); lets callers derive `loss_grads` from
/// the forward states without solving twice.
pub fn adjoint_backward<D: VjpDynamics>(
    problem: &OdeProblem<D>,
    forward: OdeSolution,
    loss_grads: &[Vec<f64>],
    tol: Tolerances,
) -> Result<AdjointGradients> {
    let n = problem.y0.len();
    let p = problem.dynamics.n_params();
    let times = &problem.eval_times;
    check_loss_grads(times.len(), n, loss_grads)?;
    if forward.states.len() != times.len() {
        return Err(Error::contract("forward solution does not match the problem's eval times"));
    }
    let mut step_hint = None;
    let t0 = problem.t_span.0;

    let mut state = vec![0.0; 2 * n + p];
    let mut backward_stats = SolverStats::default();
    let Some(last) = times.len().checked_sub(1) else {
        return Ok(AdjointGradients { grad_y0: vec![0.0; n], grad_params: vec![0.0; p], forward, backward_stats });
    };

    state[..n].copy_from_slice(&forward.states[last]);
    state[n..2 * n].copy_from_slice(&loss_grads[last]);
    let mut t_cur = times[last];
    let aug = Augmented { f: &problem.dynamics, n, p };

    let mut sweep = |state: &mut Vec<f64>, from: f64, to: f64| -> Result<()> {
        let sub = OdeProblem::new(&aug, std::mem::take(state), (from, to), vec![to])?;
        // the controller's last proposal carries over between impulses
        let sol = Dopri5::from(tol).first_step(step_hint).solve(&sub)?;
        step_hint = sol.next_step;
        backward_stats.accepted += sol.stats.accepted;
        backward_stats.rejected += sol.stats.rejected;
        backward_stats.evaluations += sol.stats.evaluations;
        *state = sol.states.into_iter().next().expect("one eval time");
        Ok(())
    };

    for i in (0..last).rev() {
        let ti = times[i];
        if ti != t_cur {
            sweep(&mut state, t_cur, ti)?;
        }
        state[..n].copy_from_slice(&forward.states[i]);
        for (a, g) in state[n..2 * n].iter_mut().zip(&loss_grads[i]) {
            *a += g;
        }
        t_cur = ti;
    }
    if t_cur != t0 {
        sweep(&mut state, t_cur, t0)?;
    }

    Ok(AdjointGradients {
        grad_y0: state[n..2 * n].to_vec(),
        grad_params: state[2 * n..].to_vec(),
        forward,
        backward_stats,
    })
}

fn check_loss_grads(n_times: usize, n: usize, loss_grads: &[Vec<f64>]) -> Result<()> {
    if loss_grads.len() != n_times {
        return Err(Error::contract(format!("{} loss gradients for {} eval times", loss_grads.len(), n_times)));
    }
    if let Some(g) = loss_grads.iter().find(|g| g.len() != n) {
        return Err(Error::contract(format!("loss gradient of length {} for state of dimension {}", g.len(), n)));
    }
    Ok(())
}
