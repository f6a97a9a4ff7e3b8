//! Limited-memory quasi-Newton minimization with a backtracking line search.
//!
//! Small dense problems only (calibration has at most a few dozen free
//! parameters). The implementation keeps the last `memory` curvature pairs,
//! guards against non-descent directions and non-finite trial values, and
//! falls back to steepest descent when the quasi-Newton step stalls.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Options {
    /// Curvature pairs kept for the inverse-Hessian estimate.
    pub memory: usize,
    pub max_iterations: usize,
    /// Convergence: infinity norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    /// Line search gives up below this step size.
    pub min_step: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            memory: 10,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-18,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub position: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Accepted quasi-Newton steps.
    pub iterations: usize,
    /// True when the gradient tolerance was reached.
    pub converged: bool,
    /// Objective at the start plus after every accepted step; non-increasing.
    pub trace: Vec<f64>,
    /// Trial steps rejected by the line search (including non-finite trials).
    pub rejected_steps: usize,
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

fn two_loop(history: &VecDeque<Pair>, g: &DVector<f64>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * p.s.dot(&q);
        q -= a * &p.y;
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = last.s.dot(&last.y) / last.y.dot(&last.y);
        q *= gamma;
    }
    for (p, &a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * p.y.dot(&q);
        q += (a - b) * &p.s;
    }
    -q
}

/// Minimizes `f`, which returns the value and gradient at a point. The final
/// iterate is the best point seen: accepted steps decrease the objective
/// monotonically, so the result is never worse than the starting point.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &Options) -> Result<Outcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut value, mut grad) = f(&x0)?;
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optim("objective non-finite at the starting point".into()));
    }
    if grad.len() != x0.len() {
        return Err(Error::Optim(format!(
            "gradient length {} does not match {} parameters",
            grad.len(),
            x0.len()
        )));
    }
    let mut x = x0;
    let mut history: VecDeque<Pair> = VecDeque::new();
    let mut trace = vec![value];
    let mut rejected = 0usize;
    let mut iterations = 0usize;
    let mut converged = grad.amax() < opts.gradient_tolerance;

    while !converged && iterations < opts.max_iterations {
        let mut direction = two_loop(&history, &grad);
        let mut slope = grad.dot(&direction);
        // reset on a non-descent (or NaN) direction: steepest descent is
        // always valid and the next accepted pair rebuilds the history
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            direction = -&grad;
            slope = grad.dot(&direction);
        }

        // Weak-Wolfe bracketing search: backtrack (bisect) while the
        // sufficient-decrease test fails, expand while the curvature test
        // fails. Acceptance under both tests keeps s'y > 0, so every stored
        // pair is safe for the two-loop recursion. On stall retry once from
        // steepest descent.
        let mut accepted: Option<(DVector<f64>, f64, DVector<f64>)> = None;
        let mut retried = false;
        'search: loop {
            let mut lo = 0.0f64;
            let mut hi = f64::INFINITY;
            let mut step = 1.0f64;
            let mut armijo_fallback: Option<(DVector<f64>, f64, DVector<f64>)> = None;
            for _ in 0..60 {
                let cand = &x + step * &direction;
                let (fv, gv) = f(&cand)?;
                let decrease_ok = fv.is_finite() && fv <= value + opts.armijo * step * slope;
                if !decrease_ok {
                    rejected += 1;
                    hi = step;
                } else if gv.dot(&direction) < 0.9 * slope {
                    // decrease fine but curvature too negative: step further
                    armijo_fallback = Some((cand, fv, gv));
                    lo = step;
                } else {
                    accepted = Some((cand, fv, gv));
                    break 'search;
                }
                step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * step };
                if step < opts.min_step || !step.is_finite() {
                    break;
                }
            }
            if accepted.is_none() && armijo_fallback.is_some() {
                // curvature never satisfied; the decrease point still makes
                // progress and the pair filter below discards its update
                accepted = armijo_fallback;
                break;
            }
            if !retried && !history.is_empty() {
                retried = true;
                history.clear();
                direction = -&grad;
                slope = grad.dot(&direction);
            } else {
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break; // line search stalled; current iterate is the best seen
        };

        let s = &x_new - &x;
        let y = &g_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                rho: 1.0 / sy,
                s,
                y,
            });
        }
        x = x_new;
        value = f_new;
        grad = g_new;
        trace.push(value);
        iterations += 1;
        converged = grad.iter().all(|v| v.is_finite()) && grad.amax() < opts.gradient_tolerance;
        if grad.iter().any(|v| !v.is_finite()) {
            break;
        }
    }

    Ok(Outcome {
        position: x,
        value,
        gradient: grad,
        iterations,
        converged,
        trace,
        rejected_steps: rejected,
    })
}
