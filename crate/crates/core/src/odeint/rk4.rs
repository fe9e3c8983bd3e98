use super::{check_finite, Dynamics, OdeProblem, OdeSolution, SolverStats};
use crate::error::{Error, Result};

/// Classical fixed-step Runge–Kutta. Each interval between consecutive
/// output times is covered by steps of `step`, the last one shortened so
/// the solution lands exactly on the output time.
pub fn rk4_integrate<D: Dynamics>(problem: &OdeProblem<D>, step: f64) -> Result<OdeSolution> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("rk4 step must be positive, got {}", step)));
    }
    let n = problem.y0.len();
    let dir = problem.direction();
    let f = &problem.dynamics;
    let mut stats = SolverStats::default();

    let mut t = problem.t_span.0;
    let mut y = problem.y0.clone();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut states = Vec::with_capacity(problem.eval_times.len());

    for &target in &problem.eval_times {
        let span = (target - t).abs();
        let tiny = 1e-12 * span.max(1.0);
        while (target - t) * dir > tiny {
            let remaining = (target - t).abs();
            let last = remaining <= step * (1.0 + 1e-9);
            let h = if last { remaining } else { step } * dir;

            f.eval(t, &y, &mut k1)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            f.eval(t + 0.5 * h, &tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            f.eval(t + 0.5 * h, &tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            f.eval(t + h, &tmp, &mut k4)?;
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            stats.evaluations += 4;
            stats.accepted += 1;
            t = if last { target } else { t + h };
            check_finite(&y, t)?;
        }
        t = target;
        states.push(y.clone());
    }

    Ok(OdeSolution { times: problem.eval_times.clone(), states, stats, next_step: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::FnDynamics;

    #[test]
    fn zero_dynamics_is_constant() {
        let f = FnDynamics::new(2, |_, _: &[f64], d: &mut [f64]| d.fill(0.0));
        let p = OdeProblem::new(&f, vec![1.5, -2.0], (0.0, 3.0), vec![0.0, 0.7, 3.0]).unwrap();
        let sol = rk4_integrate(&p, 0.1).unwrap();
        for s in &sol.states {
            assert_eq!(s, &vec![1.5, -2.0]);
        }
    }

    #[test]
    fn exponential_decay() {
        let f = FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = -y[0]);
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![1.0]).unwrap();
        let sol = rk4_integrate(&p, 1e-3).unwrap();
        assert!((sol.states[0][0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let f = FnDynamics::new(2, |_, y: &[f64], d: &mut [f64]| {
            d[0] = y[1];
            d[1] = -y[0];
        });
        let tp = 2.0 * std::f64::consts::PI;
        let p = OdeProblem::new(&f, vec![1.0, 0.0], (0.0, tp), vec![tp]).unwrap();
        let sol = rk4_integrate(&p, 1e-3).unwrap();
        assert!((sol.states[0][0] - 1.0).abs() < 1e-6);
        assert!(sol.states[0][1].abs() < 1e-6);
    }

    #[test]
    fn blow_up_reports_divergence_time() {
        // y' = y², y(0) = 1 blows up at t = 1
        let f = FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = y[0] * y[0]);
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 2.0), vec![2.0]).unwrap();
        match rk4_integrate(&p, 0.01) {
            Err(Error::Divergence { time }) => assert!(time > 0.9 && time <= 2.0),
            other => panic!("expected divergence, got {:?}", other),
        }
    }

    #[test]
    fn rejects_bad_step() {
        let f = FnDynamics::new(1, |_, _: &[f64], d: &mut [f64]| d[0] = 0.0);
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![1.0]).unwrap();
        assert!(rk4_integrate(&p, 0.0).is_err());
        assert!(rk4_integrate(&p, -0.1).is_err());
    }
}
