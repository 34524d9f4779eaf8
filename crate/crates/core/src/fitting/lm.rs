//! Damped Gauss-Newton (Levenberg-Marquardt) over a small dense parameter
//! vector. A step is accepted only if it lowers the true cost.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Linearization {
    pub cost: f64,
    pub gradient: DVector<f64>,
    /// Gauss-Newton approximation of the Hessian.
    pub hessian: DMatrix<f64>,
}

pub(crate) trait Problem {
    /// `None` marks an infeasible point (for example an empty projection).
    fn cost(&self, x: &DVector<f64>) -> Option<f64>;
    fn linearize(&self, x: &DVector<f64>) -> Option<Linearization>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub grad_tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LmReport {
    pub x: DVector<f64>,
    pub cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LmFailure {
    /// Cost at the starting point is NaN or infeasible.
    BadStart,
}

pub(crate) fn minimize<P: Problem>(problem: &P, x0: DVector<f64>, opts: LmOptions) -> Result<LmReport, LmFailure> {
    let n = x0.len();
    let mut x = x0;
    let mut lin = match problem.linearize(&x) {
        Some(l) if l.cost.is_finite() => l,
        _ => return Err(LmFailure::BadStart),
    };
    let mut report = LmReport { x: x.clone(), cost: lin.cost, trace: vec![lin.cost], iterations: 0, converged: false };
    if n == 0 {
        report.converged = true;
        return Ok(report);
    }
    let mut mu = 1e-4;
    for it in 0..opts.max_iterations {
        report.iterations = it + 1;
        if lin.gradient.amax() <= opts.grad_tol {
            report.converged = true;
            break;
        }
        let diag_floor = lin.hessian.diagonal().amax().max(1e-12) * 1e-9;
        let mut accepted = false;
        while mu < 1e16 {
            let mut a = lin.hessian.clone();
            for i in 0..n {
                a[(i, i)] += mu * lin.hessian[(i, i)].max(diag_floor);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&lin.gradient)),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let trial = &x + &step;
            match problem.cost(&trial) {
                Some(c) if c.is_finite() && c < lin.cost => {
                    let decrease = lin.cost - c;
                    x = trial;
                    mu = (mu / 3.0).max(1e-12);
                    match problem.linearize(&x) {
                        Some(l) if l.cost.is_finite() => lin = l,
                        _ => return Ok(report),
                    }
                    report.x = x.clone();
                    report.cost = lin.cost;
                    report.trace.push(lin.cost);
                    accepted = true;
                    if decrease <= opts.rel_tol * lin.cost.abs().max(1e-300) {
                        report.converged = true;
                    }
                    break;
                }
                _ => mu *= 4.0,
            }
        }
        if !accepted {
            // no descent at any damping: a local minimum at working precision
            report.converged = true;
            break;
        }
        if report.converged {
            break;
        }
    }
    Ok(report)
}
