//! Bounded, masked Levenberg–Marquardt.
//!
//! Minimizes `Σ r_i(θ)²` over the free parameters. Each iteration solves
//! `(JᵀJ + λ·D) δ = −Jᵀr`, where `D` is the diagonal of `JᵀJ` (floored so it
//! stays positive definite), projects `θ + δ` onto the bound box and accepts
//! the step when the actual RSS reduction is positive. `λ` follows the
//! gain-ratio schedule of Nielsen.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// When damping stalls, the search counts as converged if the residual is
/// this close to orthogonal to every free Jacobian column.
const STALL_COSINE: f64 = 1e-6;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LsqSettings {
    pub max_iterations: usize,
    /// Converged when an accepted step changes RSS by less than this
    /// fraction.
    pub rel_rss_tol: f64,
    /// Converged when the projected gradient's ∞-norm drops below this.
    pub grad_tol: f64,
    pub initial_lambda: f64,
}

impl Default for LsqSettings {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            rel_rss_tol: 1e-12,
            grad_tol: 1e-10,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsqSolution {
    pub params: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

pub type ResidualFn<'a> = dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a;
/// Returns the full `residuals × parameters` Jacobian.
pub type JacobianFn<'a> = dyn Fn(&[f64]) -> DMatrix<f64> + Sync + 'a;

pub struct LsqProblem<'a> {
    pub residuals: &'a ResidualFn<'a>,
    pub jacobian: Option<&'a JacobianFn<'a>>,
    /// Per-parameter `(lo, hi)`.
    pub bounds: Vec<(f64, f64)>,
    /// `true` freezes the parameter at its initial value.
    pub frozen: Vec<bool>,
}

impl<'a> LsqProblem<'a> {
    pub fn unbounded(residuals: &'a ResidualFn<'a>, n: usize) -> Self {
        Self {
            residuals,
            jacobian: None,
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
            frozen: vec![false; n],
        }
    }

    pub fn with_jacobian(mut self, jacobian: &'a JacobianFn<'a>) -> Self {
        self.jacobian = Some(jacobian);
        self
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn all_finite(r: &[f64]) -> bool {
    r.iter().all(|v| v.is_finite())
}

/// Central differences, one-sided at a bound.
fn numeric_jacobian(
    f: &ResidualFn<'_>,
    x: &[f64],
    r0: &[f64],
    free: &[usize],
    bounds: &[(f64, f64)],
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(r0.len(), free.len());
    let mut probe = x.to_vec();
    for (col, &j) in free.iter().enumerate() {
        let h = f64::EPSILON.cbrt() * x[j].abs().max(1.0);
        let (lo, hi) = bounds[j];
        let up = x[j] + h <= hi;
        let down = x[j] - h >= lo;
        let (rp, rm, span) = match (up, down) {
            (true, true) => {
                probe[j] = x[j] + h;
                let rp = f(&probe);
                probe[j] = x[j] - h;
                let rm = f(&probe);
                (rp, rm, 2.0 * h)
            }
            (true, false) => {
                probe[j] = x[j] + h;
                (f(&probe), r0.to_vec(), h)
            }
            _ => {
                probe[j] = x[j] - h;
                (r0.to_vec(), f(&probe), h)
            }
        };
        probe[j] = x[j];
        for i in 0..r0.len() {
            jac[(i, col)] = (rp[i] - rm[i]) / span;
        }
    }
    jac
}

fn projected_gradient_norm(g: &DVector<f64>, x: &[f64], free: &[usize], bounds: &[(f64, f64)]) -> f64 {
    free.iter()
        .enumerate()
        .map(|(col, &j)| {
            let (lo, hi) = bounds[j];
            // descent direction is -g; blocked if it points out of the box
            let blocked = (x[j] <= lo && g[col] > 0.0) || (x[j] >= hi && g[col] < 0.0);
            if blocked {
                0.0
            } else {
                g[col].abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Largest cosine between the residual and a free Jacobian column;
/// zero at a stationary point whatever the scale of the problem.
fn max_cosine(
    jac: &DMatrix<f64>,
    g: &DVector<f64>,
    r_norm: f64,
    x: &[f64],
    free: &[usize],
    bounds: &[(f64, f64)],
) -> f64 {
    if r_norm == 0.0 {
        return 0.0;
    }
    free.iter()
        .enumerate()
        .map(|(col, &j)| {
            let (lo, hi) = bounds[j];
            let blocked = (x[j] <= lo && g[col] > 0.0) || (x[j] >= hi && g[col] < 0.0);
            let norm = jac.column(col).norm();
            if blocked || norm == 0.0 {
                0.0
            } else {
                g[col].abs() / (norm * r_norm)
            }
        })
        .fold(0.0, f64::max)
}

/// Solves `(JᵀJ + λ·diag(JᵀJ)) δ = −g` over the parameters not pinned at a
/// bound by the gradient; pinned ones get a zero step.
fn damped_step(
    jtj: &DMatrix<f64>,
    g: &DVector<f64>,
    x: &[f64],
    free: &[usize],
    bounds: &[(f64, f64)],
    lambda: f64,
) -> Option<DVector<f64>> {
    let max_diag = jtj.diagonal().iter().cloned().fold(0.0, f64::max);
    let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
    let moving: Vec<usize> = (0..free.len())
        .filter(|&c| {
            let (lo, hi) = bounds[free[c]];
            let x = x[free[c]];
            !((x <= lo && g[c] > 0.0) || (x >= hi && g[c] < 0.0))
        })
        .collect();
    let k = moving.len();
    let mut damped = DMatrix::from_fn(k, k, |a, b| jtj[(moving[a], moving[b])]);
    for (a, &c) in moving.iter().enumerate() {
        damped[(a, a)] += lambda * jtj[(c, c)].max(floor);
    }
    let rhs = DVector::from_iterator(k, moving.iter().map(|&c| -g[c]));
    let sub = damped
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| damped.lu().solve(&rhs))?;
    let mut full = DVector::zeros(free.len());
    for (a, &c) in moving.iter().enumerate() {
        full[c] = sub[a];
    }
    Some(full)
}

/// Damped least squares from `init`.
pub fn least_squares(
    problem: &LsqProblem<'_>,
    init: &[f64],
    settings: &LsqSettings,
) -> Result<LsqSolution> {
    let n = init.len();
    if problem.bounds.len() != n || problem.frozen.len() != n {
        return Err(Error::Invalid(format!(
            "{n} parameters but {} bounds and {} mask entries",
            problem.bounds.len(),
            problem.frozen.len()
        )));
    }
    for (j, (&v, &(lo, hi))) in init.iter().zip(&problem.bounds).enumerate() {
        if !(lo <= v && v <= hi) {
            return Err(Error::Invalid(format!(
                "initial value {v} of parameter {j} outside bounds [{lo}, {hi}]"
            )));
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !problem.frozen[j]).collect();
    let f = problem.residuals;

    let mut x = init.to_vec();
    let mut r = f(&x);
    if r.len() < free.len() {
        return Err(Error::Underdetermined {
            residuals: r.len(),
            free: free.len(),
        });
    }
    if !all_finite(&r) {
        return Err(Error::NonFinite("residual at the initial point".into()));
    }
    let mut rss = sum_sq(&r);
    if free.is_empty() {
        return Ok(LsqSolution {
            params: x,
            rss,
            iterations: 0,
            converged: true,
            gradient_norm: 0.0,
        });
    }

    let jacobian_at = |x: &[f64], r: &[f64]| -> DMatrix<f64> {
        match problem.jacobian {
            Some(jf) => {
                let full = jf(x);
                DMatrix::from_fn(r.len(), free.len(), |i, c| full[(i, free[c])])
            }
            None => numeric_jacobian(f, x, r, &free, &problem.bounds),
        }
    };

    let mut lambda = settings.initial_lambda;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;
    let mut small_steps = 0;

    let mut jac = jacobian_at(&x, &r);
    loop {
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        grad_norm = projected_gradient_norm(&g, &x, &free, &problem.bounds);
        if grad_norm < settings.grad_tol || rss == 0.0 {
            converged = true;
            break;
        }
        if iterations >= settings.max_iterations {
            break;
        }
        iterations += 1;

        let jtj = jac.tr_mul(&jac);
        let step = damped_step(&jtj, &g, &x, &free, &problem.bounds, lambda);
        let Some(step) = step else {
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() || lambda > 1e300 {
                break;
            }
            continue;
        };

        let mut candidate = x.clone();
        for (c, &j) in free.iter().enumerate() {
            let (lo, hi) = problem.bounds[j];
            candidate[j] = (x[j] + step[c]).clamp(lo, hi);
        }
        let delta = DVector::from_iterator(
            free.len(),
            free.iter().map(|&j| candidate[j] - x[j]),
        );
        if delta.iter().all(|&v| v == 0.0) {
            // projection or rounding leaves nothing to try
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e300 {
                break;
            }
            continue;
        }
        let r_new = f(&candidate);
        let rss_new = if all_finite(&r_new) {
            sum_sq(&r_new)
        } else {
            f64::INFINITY
        };
        // predicted reduction of the local quadratic model
        let predicted = -(2.0 * delta.dot(&g) + delta.dot(&(&jtj * &delta)));
        let actual = rss - rss_new;

        if rss_new.is_finite() && actual > 0.0 {
            let rho = if predicted > 0.0 { actual / predicted } else { 1.0 };
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            lambda = lambda.max(1e-300);
            nu = 2.0;
            let rel = actual / rss;
            x = candidate;
            r = r_new;
            rss = rss_new;
            // two small improvements in a row, so one lucky step with a
            // tiny decrease does not end the search early
            small_steps = if rel < settings.rel_rss_tol { small_steps + 1 } else { 0 };
            if small_steps >= 2 {
                converged = true;
                let rv = DVector::from_column_slice(&r);
                jac = jacobian_at(&x, &r);
                grad_norm = projected_gradient_norm(&jac.tr_mul(&rv), &x, &free, &problem.bounds);
                break;
            }
            jac = jacobian_at(&x, &r);
        } else {
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() || lambda > 1e300 {
                break;
            }
        }
    }

    // damping blew up before the iteration cap: no representable step
    // lowers RSS any more
    let stalled = !converged && iterations < settings.max_iterations;

    {
        // one undamped Gauss–Newton step, kept unless RSS grows beyond
        // rounding; near the optimum RSS cannot resolve the last digits, so
        // damped steps stall there
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        let jtj = jac.tr_mul(&jac);
        if let Some(step) = damped_step(&jtj, &g, &x, &free, &problem.bounds, 0.0) {
            let mut candidate = x.clone();
            for (c, &j) in free.iter().enumerate() {
                let (lo, hi) = problem.bounds[j];
                candidate[j] = (x[j] + step[c]).clamp(lo, hi);
            }
            let r_new = f(&candidate);
            if all_finite(&r_new) && sum_sq(&r_new) <= rss * (1.0 + 8.0 * f64::EPSILON) {
                rss = sum_sq(&r_new);
                x = candidate;
                jac = jacobian_at(&x, &r_new);
                r = r_new;
                let rv = DVector::from_column_slice(&r);
                grad_norm = projected_gradient_norm(&jac.tr_mul(&rv), &x, &free, &problem.bounds);
                converged |= grad_norm < settings.grad_tol;
            }
        }
    }

    if stalled && !converged {
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        converged = max_cosine(&jac, &g, rv.norm(), &x, &free, &problem.bounds) < STALL_COSINE;
    }

    Ok(LsqSolution {
        params: x,
        rss,
        iterations,
        converged,
        gradient_norm: grad_norm,
    })
}
