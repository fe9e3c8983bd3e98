use super::{check_finite, Dynamics, OdeProblem, OdeSolution, SolverStats, Tolerances};
use crate::error::{Error, Result};

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense output (Hairer & Wanner, contd5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Adaptive Dormand–Prince 5(4) integrator with PI step control and
/// 4th-order dense output at the requested times.
#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Initial step magnitude; chosen automatically when `None`.
    pub first_step: Option<f64>,
    safety: f64,
    beta: f64,
    fac_min: f64,
    fac_max: f64,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5::from(Tolerances::default())
    }
}

impl From<Tolerances> for Dopri5 {
    fn from(t: Tolerances) -> Self {
        Dopri5::new(t.rtol, t.atol)
    }
}

/// Shorthand for `Dopri5::new(rtol, atol).solve(problem)`.
pub fn dopri5_integrate<D: Dynamics>(problem: &OdeProblem<D>, rtol: f64, atol: f64) -> Result<OdeSolution> {
    Dopri5::new(rtol, atol).solve(problem)
}

impl Dopri5 {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Dopri5 { rtol, atol, max_steps: 100_000, first_step: None, safety: 0.9, beta: 0.04, fac_min: 0.2, fac_max: 10.0 }
    }

    pub fn max_steps(mut self, n: usize) -> Self {
        self.max_steps = n;
        self
    }

    pub fn first_step(mut self, h: Option<f64>) -> Self {
        self.first_step = h.filter(|h| *h > 0.0 && h.is_finite());
        self
    }

    pub fn solve<D: Dynamics>(&self, problem: &OdeProblem<D>) -> Result<OdeSolution> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::contract(format!(
                "tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        let f = &problem.dynamics;
        let n = problem.y0.len();
        let (t0, t1) = problem.t_span;
        let dir = problem.direction();
        let span = (t1 - t0).abs();
        let eval_times = &problem.eval_times;
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(eval_times.len());
        let mut stats = SolverStats::default();
        let mut next = 0;

        while next < eval_times.len() && eval_times[next] == t0 {
            states.push(problem.y0.clone());
            next += 1;
        }
        if span == 0.0 || next == eval_times.len() {
            // nothing left to integrate towards
            if next < eval_times.len() {
                return Err(Error::contract("eval time outside empty span"));
            }
            return Ok(OdeSolution { times: eval_times.clone(), states, stats, next_step: None });
        }
        // Integrate only as far as the last requested time.
        let t_stop = *eval_times.last().unwrap();

        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        let mut y = problem.y0.clone();
        let mut y_new = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut t = t0;

        f.eval(t, &y, &mut k[0])?;
        stats.evaluations += 1;
        check_finite(&k[0], t)?;

        let h_max = (t_stop - t0).abs();
        let min_step = 1e-12 * span;
        let mut h = match self.first_step {
            Some(h0) if h0 >= min_step => dir * h0.min(h_max),
            _ => self.initial_step(f, t, &y, &k[0], dir, h_max, &mut stats)?,
        };
        let mut next_step: Option<f64>;
        let mut fac_old: f64 = 1e-4;
        let mut reject = false;
        let mut last_nonfinite = false;

        loop {
            if stats.accepted + stats.rejected >= self.max_steps {
                return Err(Error::Stiffness { time: t, step: h });
            }
            if h.abs() < min_step {
                return Err(if last_nonfinite {
                    Error::Divergence { time: t }
                } else {
                    Error::Stiffness { time: t, step: h }
                });
            }
            let last = (t + h - t_stop) * dir >= 0.0;
            let h_free = h;
            if last {
                h = t_stop - t;
            }

            // stages
            for i in 0..n {
                tmp[i] = y[i] + h * A21 * k[0][i];
            }
            f.eval(t + C2 * h, &tmp, &mut k[1])?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
            }
            f.eval(t + C3 * h, &tmp, &mut k[2])?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
            }
            f.eval(t + C4 * h, &tmp, &mut k[3])?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
            }
            f.eval(t + C5 * h, &tmp, &mut k[4])?;
            for i in 0..n {
                tmp[i] = y[i]
                    + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
            }
            f.eval(t + h, &tmp, &mut k[5])?;
            for i in 0..n {
                y_new[i] = y[i]
                    + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
            }
            f.eval(t + h, &y_new, &mut k[6])?;
            stats.evaluations += 6;

            let finite = y_new.iter().chain(k[6].iter()).all(|v| v.is_finite());
            let err = if finite {
                let mut acc = 0.0;
                for i in 0..n {
                    let e = h
                        * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
                    let sk = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                    acc += (e / sk) * (e / sk);
                }
                (acc / n as f64).sqrt()
            } else {
                f64::INFINITY
            };

            if !err.is_finite() {
                last_nonfinite = true;
                stats.rejected += 1;
                reject = true;
                h *= 0.25;
                continue;
            }
            last_nonfinite = false;

            let expo = 0.2 - self.beta * 0.75;
            let fac11 = err.powf(expo);
            if err <= 1.0 {
                stats.accepted += 1;
                let t_new = if last { t_stop } else { t + h };

                while next < eval_times.len() && (eval_times[next] - t_new) * dir <= 0.0 {
                    let te = eval_times[next];
                    if te == t_new {
                        states.push(y_new.clone());
                    } else {
                        let theta = (te - t) / h;
                        states.push(dense(&y, &y_new, &k, h, theta));
                    }
                    next += 1;
                }

                std::mem::swap(&mut y, &mut y_new);
                k.swap(0, 6);
                t = t_new;
                check_finite(&y, t)?;

                let fac = (fac11 / fac_old.powf(self.beta) / self.safety)
                    .clamp(1.0 / self.fac_max, 1.0 / self.fac_min);
                let mut h_new = h / fac;
                if h_new.abs() > h_max {
                    h_new = h_max * dir;
                }
                if reject {
                    h_new = dir * h_new.abs().min(h.abs());
                }
                // a final step clipped to t_stop says little about the scale
                next_step = Some(if last { (h_free / fac).abs().min(h_max) } else { h_new.abs() });
                if last || next == eval_times.len() {
                    break;
                }
                fac_old = err.max(1e-4);
                reject = false;
                h = h_new;
            } else {
                stats.rejected += 1;
                reject = true;
                h /= (fac11 / self.safety).min(1.0 / self.fac_min);
            }
        }

        if states.len() != eval_times.len() {
            return Err(Error::contract("solver finished before reaching every eval time"));
        }
        Ok(OdeSolution { times: eval_times.clone(), states, stats, next_step })
    }

    #[allow(clippy::too_many_arguments)]
    fn initial_step<D: Dynamics>(
        &self,
        f: &D,
        t: f64,
        y: &[f64],
        f0: &[f64],
        dir: f64,
        h_max: f64,
        stats: &mut SolverStats,
    ) -> Result<f64> {
        let n = y.len();
        let mut dnf = 0.0;
        let mut dny = 0.0;
        for i in 0..n {
            let sk = self.atol + self.rtol * y[i].abs();
            dnf += (f0[i] / sk).powi(2);
            dny += (y[i] / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
        h = h.min(h_max);

        let y1: Vec<f64> = (0..n).map(|i| y[i] + dir * h * f0[i]).collect();
        let mut f1 = vec![0.0; n];
        f.eval(t + dir * h, &y1, &mut f1)?;
        stats.evaluations += 1;

        let mut der2 = 0.0;
        for i in 0..n {
            let sk = self.atol + self.rtol * y[i].abs();
            der2 += ((f1[i] - f0[i]) / sk).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.abs().max(dnf.sqrt());
        let h1 = if der12.is_finite() && der12 > 1e-15 {
            (0.01 / der12).powf(0.2)
        } else {
            (1e-6f64).max(h.abs() * 1e-3)
        };
        Ok(dir * (100.0 * h).min(h1).min(h_max))
    }
}

/// Interpolated state at `t + theta·h` inside an accepted step.
fn dense(y0: &[f64], y1: &[f64], k: &[Vec<f64>; 7], h: f64, theta: f64) -> Vec<f64> {
    let theta1 = 1.0 - theta;
    (0..y0.len())
        .map(|i| {
            let ydiff = y1[i] - y0[i];
            let bspl = h * k[0][i] - ydiff;
            let r4 = ydiff - h * k[6][i] - bspl;
            let r5 = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            y0[i] + theta * (ydiff + theta1 * (bspl + theta * (r4 + theta1 * r5)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::FnDynamics;

    fn decay() -> FnDynamics<impl Fn(f64, &[f64], &mut [f64])> {
        FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = -y[0])
    }

    #[test]
    fn exponential_decay_tight() {
        let f = decay();
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![1.0]).unwrap();
        let sol = dopri5_integrate(&p, 1e-8, 1e-8).unwrap();
        assert!((sol.states[0][0] - 0.36787944117144233).abs() < 1e-7);
    }

    #[test]
    fn reversed_span_recovers_start() {
        let f = decay();
        let p = OdeProblem::new(&f, vec![(-1.0f64).exp()], (1.0, 0.0), vec![0.0]).unwrap();
        let sol = dopri5_integrate(&p, 1e-8, 1e-8).unwrap();
        assert!((sol.states[0][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_dynamics_no_rejections() {
        let f = FnDynamics::new(3, |_, _: &[f64], d: &mut [f64]| d.fill(0.0));
        let y0 = vec![0.25, -3.0, 1e5];
        let p = OdeProblem::new(&f, y0.clone(), (0.0, 10.0), vec![0.1, 2.0, 2.0, 9.99, 10.0]).unwrap();
        let sol = Dopri5::default().solve(&p).unwrap();
        assert_eq!(sol.stats.rejected, 0);
        for s in &sol.states {
            assert_eq!(s, &y0);
        }
    }

    #[test]
    fn dense_output_matches_analytic() {
        let f = decay();
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 2.0), times.clone()).unwrap();
        let sol = dopri5_integrate(&p, 1e-9, 1e-11).unwrap();
        for (t, s) in times.iter().zip(&sol.states) {
            assert!((s[0] - (-t).exp()).abs() < 1e-8, "t={} got {}", t, s[0]);
        }
    }

    #[test]
    fn stops_at_last_eval_time() {
        // blows up at t = 1 but only t <= 0.5 is requested
        let f = FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = y[0] * y[0]);
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 5.0), vec![0.5]).unwrap();
        let sol = dopri5_integrate(&p, 1e-8, 1e-10).unwrap();
        assert!((sol.states[0][0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_time_blow_up_is_a_typed_error() {
        let f = FnDynamics::new(1, |_, y: &[f64], d: &mut [f64]| d[0] = y[0] * y[0]);
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 2.0), vec![2.0]).unwrap();
        let err = dopri5_integrate(&p, 1e-6, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Stiffness { .. } | Error::Divergence { .. }), "{:?}", err);
    }

    #[test]
    fn rejects_non_positive_tolerances() {
        let f = decay();
        let p = OdeProblem::new(&f, vec![1.0], (0.0, 1.0), vec![1.0]).unwrap();
        assert!(matches!(dopri5_integrate(&p, 0.0, 1e-8), Err(Error::Contract(_))));
    }
}
