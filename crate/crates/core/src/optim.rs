//! Quasi-Newton (BFGS) minimisation with analytic or central finite-difference
//! gradients.

use nalgebra::{DMatrix, DVector};

use crate::exec::{map_range, Execution};

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Relative finite-difference step: `h_j = fd_step * max(1, |x_j|)`.
    pub fd_step: f64,
    /// Stop when an accepted step lowers `f` by less than `f_tol * (1 + |f|)`.
    pub f_tol: f64,
    pub execution: Execution,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-7,
            fd_step: 1e-6,
            f_tol: 0.0,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    SmallDecrease,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_max_norm: f64,
    pub iterations: usize,
    /// Objective evaluations, excluding those made inside gradient calls.
    pub evaluations: usize,
    pub gradient_calls: usize,
    pub stop: StopReason,
    /// Final inverse-Hessian approximation, reusable as a warm start.
    pub inv_hessian: DMatrix<f64>,
}

fn guard(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Central-difference gradient; evaluations are independent and may run in parallel.
pub fn fd_gradient<F>(f: &F, x: &[f64], rel_step: f64, exec: Execution) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x.len();
    let vals = map_range(exec, 2 * d, |e| {
        let j = e / 2;
        let h = rel_step * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        xp[j] += if e % 2 == 0 { h } else { -h };
        guard(f(&xp))
    });
    (0..d)
        .map(|j| {
            let h = rel_step * x[j].abs().max(1.0);
            (vals[2 * j] - vals[2 * j + 1]) / (2.0 * h)
        })
        .collect()
}

fn max_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Minimises `f` from `x0` (with `f0 = f(x0)`) using finite-difference
/// gradients. `warm` seeds the inverse Hessian; without it the first step
/// uses a gradient-scaled identity.
pub fn minimize<F>(f: &F, x0: &[f64], f0: f64, opts: &BfgsOptions, warm: Option<&DMatrix<f64>>) -> BfgsOutcome
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let grad = |x: &[f64]| fd_gradient(f, x, opts.fd_step, opts.execution);
    minimize_with_gradient(f, &grad, x0, f0, opts, warm)
}

/// As [`minimize`], with gradients supplied by `grad`.
pub fn minimize_with_gradient<F, G>(
    f: &F,
    grad: &G,
    x0: &[f64],
    f0: f64,
    opts: &BfgsOptions,
    warm: Option<&DMatrix<f64>>,
) -> BfgsOutcome
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let d = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = guard(f0);
    let mut evaluations = 0usize;
    let mut g = DVector::from_vec(grad(x.as_slice()));
    let mut gradient_calls = 1usize;
    let mut h_inv = match warm {
        Some(h) if h.nrows() == d => h.clone(),
        _ => DMatrix::identity(d, d) / g.amax().max(1.0),
    };
    let mut iterations = 0;
    let stop = loop {
        if max_norm(g.as_slice()) < opts.grad_tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= opts.max_iter {
            break StopReason::MaxIterations;
        }
        iterations += 1;
        let mut p = -(&h_inv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(d, d) / g.amax().max(1.0);
            p = -(&h_inv * &g);
            slope = g.dot(&p);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &p * t;
            let ft = guard(f(trial.as_slice()));
            evaluations += 1;
            if ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= if ft.is_finite() { 0.5 } else { 0.1 };
        }
        let Some((x_new, f_new)) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let decrease = fx - f_new;
        let g_new = DVector::from_vec(grad(x_new.as_slice()));
        gradient_calls += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h_inv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if decrease < opts.f_tol * (1.0 + fx.abs()) {
            break StopReason::SmallDecrease;
        }
    };
    BfgsOutcome {
        grad_max_norm: max_norm(g.as_slice()),
        x: x.as_slice().to_vec(),
        f: fx,
        iterations,
        evaluations,
        gradient_calls,
        stop,
        inv_hessian: h_inv,
    }
}
