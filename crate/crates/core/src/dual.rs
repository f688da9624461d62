//! Inner problem at fixed `theta`: project the empirical measure onto the
//! moment constraints through the concave dual
//!
//! ```text
//! sup_{t in R^{1+ell}}  t0 - (1/n) sum_i phi*(t^T fbar(X_i, theta)),   fbar = (1, f)
//! ```
//!
//! whose maximizer gives the projected weights `Q(X_i) = phi*'(s_i) / n`,
//! `s_i = t^T fbar(X_i, theta)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, solve_psd};
use crate::model::{MomentModel, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `|gradient|_inf <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// A dual value above this means the iterates are running off to `+inf`.
    pub value_cap: f64,
    /// Same, measured on `|t|_inf`.
    pub t_cap: f64,
    /// Iterates keep every `s_i` at least this far inside finite endpoints.
    pub boundary_margin: f64,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 100,
            value_cap: 1e8,
            t_cap: 1e10,
            boundary_margin: 1e-12,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualStatus {
    Converged,
    /// Dual unbounded: zero is (numerically) outside the convex hull of the
    /// moment vectors, or the weights cannot stay in the generator's domain.
    NoFeasibleWeights,
    MaxIterations,
    /// The line search could not make progress without leaving the domain.
    DomainCollapse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    /// `(t0, t1, ..., t_ell)`; `t0 = 0` for the reduced EL solve.
    pub t_bar: Vec<f64>,
    /// Estimated divergence between the sample and the constraint set.
    pub value: f64,
    /// Projected weights `Q(X_i)`.
    pub weights: Vec<f64>,
    pub status: DualStatus,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl DualSolution {
    pub fn is_converged(&self) -> bool {
        self.status == DualStatus::Converged
    }
}

/// Value, gradient and Hessian of the dual objective at one `t_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualObjective {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

/// Moment vectors at fixed `theta`, with the divergence that scores them.
struct DualProblem<'a> {
    spec: &'a DivergenceSpec,
    moments: &'a [f64],
    n: usize,
    ell: usize,
    margin: f64,
}

impl DualProblem<'_> {
    fn s(&self, t: &[f64], i: usize) -> f64 {
        let f = &self.moments[i * self.ell..(i + 1) * self.ell];
        t[0] + f.iter().zip(&t[1..]).map(|(a, b)| a * b).sum::<f64>()
    }

    fn feasible(&self, t: &[f64]) -> bool {
        let dom = self.spec.conjugate_domain();
        (0..self.n).all(|i| dom.contains_with_margin(self.s(t, i), self.margin))
    }

    fn value(&self, t: &[f64]) -> Option<f64> {
        if !self.feasible(t) {
            return None;
        }
        let sum: f64 = (0..self.n).map(|i| self.spec.conj(self.s(t, i))).sum();
        Some(t[0] - sum / self.n as f64)
    }

    fn eval(&self, t: &[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        if !self.feasible(t) {
            return None;
        }
        let k = self.ell + 1;
        let inv_n = 1.0 / self.n as f64;
        let mut value = t[0];
        let mut grad = DVector::zeros(k);
        grad[0] = 1.0;
        let mut hess = DMatrix::zeros(k, k);
        let mut fbar = DVector::zeros(k);
        fbar[0] = 1.0;
        for i in 0..self.n {
            let s = self.s(t, i);
            fbar.rows_mut(1, self.ell)
                .copy_from_slice(&self.moments[i * self.ell..(i + 1) * self.ell]);
            value -= inv_n * self.spec.conj(s);
            grad.axpy(-inv_n * self.spec.conj_prime(s), &fbar, 1.0);
            hess.ger(-inv_n * self.spec.conj_second(s), &fbar, &fbar, 1.0);
        }
        Some((value, grad, hess))
    }
}

/// Reduced empirical-likelihood dual `(1/n) sum log(1 - t^T f_i)`.
struct ElProblem<'a> {
    moments: &'a [f64],
    n: usize,
    ell: usize,
    margin: f64,
}

impl ElProblem<'_> {
    fn one_minus(&self, t: &[f64], i: usize) -> f64 {
        let f = &self.moments[i * self.ell..(i + 1) * self.ell];
        1.0 - f.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
    }

    fn value(&self, t: &[f64]) -> Option<f64> {
        let mut sum = 0.0;
        for i in 0..self.n {
            let u = self.one_minus(t, i);
            if u <= self.margin {
                return None;
            }
            sum += u.ln();
        }
        Some(sum / self.n as f64)
    }

    fn eval(&self, t: &[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let inv_n = 1.0 / self.n as f64;
        let mut value = 0.0;
        let mut grad = DVector::zeros(self.ell);
        let mut hess = DMatrix::zeros(self.ell, self.ell);
        for i in 0..self.n {
            let u = self.one_minus(t, i);
            if u <= self.margin {
                return None;
            }
            let f = DVector::from_column_slice(&self.moments[i * self.ell..(i + 1) * self.ell]);
            value += inv_n * u.ln();
            grad.axpy(-inv_n / u, &f, 1.0);
            hess.ger(-inv_n / (u * u), &f, &f, 1.0);
        }
        Some((value, grad, hess))
    }
}

struct NewtonOutcome {
    t: Vec<f64>,
    status: DualStatus,
    iterations: usize,
    grad_norm: f64,
}

/// Farkas certificate read off an iterate: if `v^T f_i < 0` for every row, no
/// nonnegative weights can average the moments to zero. When weights must be
/// strictly positive, `v^T f_i <= 0` everywhere with one strict row suffices.
fn separates(moments: &[f64], ell: usize, v: &[f64], positive_weights: bool) -> bool {
    let mut strict = 0;
    let mut rows = 0;
    for f in moments.chunks_exact(ell) {
        rows += 1;
        let mut s = 0.0;
        let mut scale = 0.0;
        for (a, b) in f.iter().zip(v) {
            s += a * b;
            scale += (a * b).abs();
        }
        if s > 0.0 {
            return false;
        }
        if s < -64.0 * f64::EPSILON * scale {
            strict += 1;
        }
    }
    if positive_weights {
        strict > 0
    } else {
        strict == rows
    }
}

/// Damped Newton ascent for a smooth concave objective on an open domain.
/// `eval` returns `None` off the domain; `value` is the cheap value-only probe
/// used by the line search; `residual` measures stationarity from `(t, grad)`;
/// `infeasible` may stop early with a certificate that the dual is unbounded.
fn newton_ascent(
    dim: usize,
    opts: &SolverOptions,
    eval: impl Fn(&[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)>,
    value: impl Fn(&[f64]) -> Option<f64>,
    residual: impl Fn(&[f64], &DVector<f64>) -> f64,
    infeasible: impl Fn(&[f64]) -> bool,
) -> NewtonOutcome {
    let mut t = vec![0.0; dim];
    let mut grad_norm = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let Some((v, g, h)) = eval(&t) else {
            return NewtonOutcome {
                t,
                status: DualStatus::DomainCollapse,
                iterations: iter,
                grad_norm,
            };
        };
        grad_norm = residual(&t, &g);
        if v > opts.value_cap || inf_norm(&t) > opts.t_cap || !v.is_finite() || infeasible(&t) {
            return NewtonOutcome {
                t,
                status: DualStatus::NoFeasibleWeights,
                iterations: iter,
                grad_norm,
            };
        }
        if grad_norm <= opts.tol {
            return NewtonOutcome {
                t,
                status: DualStatus::Converged,
                iterations: iter,
                grad_norm,
            };
        }
        let neg_h = -h;
        let dir = match solve_psd(&neg_h, &g) {
            Some((d, _)) if g.dot(&d) > 0.0 => d,
            _ => g.clone(),
        };
        let slope = g.dot(&dir);
        // below rounding level the Armijo test is noise; a feasible full step is fine
        let negligible = slope <= 1e-14 * (1.0 + v.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..64 {
            let cand: Vec<f64> = t
                .iter()
                .zip(dir.iter())
                .map(|(a, d)| a + step * d)
                .collect();
            if let Some(vn) = value(&cand) {
                if vn >= v + opts.armijo * step * slope
                    || (negligible && vn >= v - 1e-14 * (1.0 + v.abs()))
                {
                    accepted = Some(cand);
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some(next) => t = next,
            None => {
                return NewtonOutcome {
                    t,
                    status: DualStatus::DomainCollapse,
                    iterations: iter + 1,
                    grad_norm,
                };
            }
        }
    }
    let grad_norm = eval(&t).map_or(grad_norm, |(_, g, _)| residual(&t, &g));
    let status = if grad_norm <= opts.tol {
        DualStatus::Converged
    } else {
        DualStatus::MaxIterations
    };
    NewtonOutcome {
        t,
        status,
        iterations: opts.max_iter,
        grad_norm,
    }
}

/// Dual objective, gradient and Hessian at `t_bar`.
pub fn dual_objective(
    spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    t_bar: &[f64],
) -> Result<DualObjective> {
    if t_bar.len() != model.moment_dim() + 1 {
        return Err(Error::Dimension(format!(
            "t_bar has length {}, expected {}",
            t_bar.len(),
            model.moment_dim() + 1
        )));
    }
    let moments = model.moment_matrix(sample, theta)?;
    let problem = DualProblem {
        spec,
        moments: &moments,
        n: sample.len(),
        ell: model.moment_dim(),
        margin: 0.0,
    };
    if let Some(i) = (0..problem.n).find(|&i| {
        !spec
            .conjugate_domain()
            .contains_interior(problem.s(t_bar, i))
    }) {
        return Err(Error::DomainError {
            value: problem.s(t_bar, i),
            domain: spec.conjugate_domain().to_string(),
        });
    }
    let (value, gradient, hessian) = problem.eval(t_bar).expect("feasibility checked");
    Ok(DualObjective {
        value,
        gradient: gradient.as_slice().to_vec(),
        hessian,
    })
}

/// Solves the fixed-`theta` dual by damped Newton from `t_bar = 0`.
pub fn solve_inner(
    spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    opts: &SolverOptions,
) -> Result<DualSolution> {
    let moments = model.moment_matrix(sample, theta)?;
    Ok(solve_inner_moments(
        spec,
        &moments,
        sample.len(),
        model.moment_dim(),
        opts,
    ))
}

/// [`solve_inner`] on a precomputed row-major `n x ell` moment matrix.
pub fn solve_inner_moments(
    spec: &DivergenceSpec,
    moments: &[f64],
    n: usize,
    ell: usize,
    opts: &SolverOptions,
) -> DualSolution {
    let problem = DualProblem {
        spec,
        moments,
        n,
        ell,
        margin: opts.boundary_margin,
    };
    let dom = spec.primal_domain();
    // signed weights (e.g. chi-square) admit no hull certificate
    let certificate = (dom.lo == 0.0).then_some(!dom.lo_closed);
    let out = newton_ascent(
        ell + 1,
        opts,
        |t| problem.eval(t),
        |t| problem.value(t),
        |_, g| inf_norm(g.as_slice()),
        |t| certificate.is_some_and(|positive| separates(moments, ell, &t[1..], positive)),
    );
    let (value, weights) = if out.status == DualStatus::Converged {
        let value = problem.value(&out.t).unwrap_or(f64::NAN);
        let weights = (0..n)
            .map(|i| spec.conj_prime(problem.s(&out.t, i)) / n as f64)
            .collect();
        (value, weights)
    } else {
        (failed_value(out.status), vec![f64::NAN; n])
    };
    DualSolution {
        t_bar: out.t,
        value,
        weights,
        status: out.status,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
    }
}

/// Empirical-likelihood dual with `t0` eliminated: maximizes
/// `(1/n) sum log(1 - t^T f(X_i, theta))` over `t in R^ell`.
pub fn solve_inner_el(
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    opts: &SolverOptions,
) -> Result<DualSolution> {
    let moments = model.moment_matrix(sample, theta)?;
    Ok(solve_inner_el_moments(
        &moments,
        sample.len(),
        model.moment_dim(),
        opts,
    ))
}

pub fn solve_inner_el_moments(
    moments: &[f64],
    n: usize,
    ell: usize,
    opts: &SolverOptions,
) -> DualSolution {
    let problem = ElProblem {
        moments,
        n,
        ell,
        margin: opts.boundary_margin,
    };
    // The gradient alone vanishes along rays to infinity when the hull
    // condition fails; `t^T grad` is exactly `1 - sum w`, so bound it too.
    let out = newton_ascent(
        ell,
        opts,
        |t| problem.eval(t),
        |t| problem.value(t),
        |t, g| inf_norm(g.as_slice()).max(g.iter().zip(t).map(|(a, b)| a * b).sum::<f64>().abs()),
        |t| separates(moments, ell, t, true),
    );
    let (value, weights) = if out.status == DualStatus::Converged {
        let value = problem.value(&out.t).unwrap_or(f64::NAN);
        let weights = (0..n)
            .map(|i| 1.0 / (n as f64 * problem.one_minus(&out.t, i)))
            .collect();
        (value, weights)
    } else {
        (failed_value(out.status), vec![f64::NAN; n])
    };
    let mut t_bar = Vec::with_capacity(ell + 1);
    t_bar.push(0.0);
    t_bar.extend_from_slice(&out.t);
    DualSolution {
        t_bar,
        value,
        weights,
        status: out.status,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
    }
}

/// Dispatches to the reduced EL solver for KLm and the general solver
/// otherwise.
pub(crate) fn solve_auto_moments(
    spec: &DivergenceSpec,
    moments: &[f64],
    n: usize,
    ell: usize,
    opts: &SolverOptions,
    reduce_el: bool,
) -> DualSolution {
    if reduce_el && spec.kind() == DivergenceKind::KLm {
        solve_inner_el_moments(moments, n, ell, opts)
    } else {
        solve_inner_moments(spec, moments, n, ell, opts)
    }
}

fn failed_value(status: DualStatus) -> f64 {
    match status {
        DualStatus::MaxIterations => f64::NAN,
        _ => f64::INFINITY,
    }
}

/// `(1/n) sum phi(n w_i)`: the primal objective at given weights.
pub fn primal_value(spec: &DivergenceSpec, weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    weights.iter().map(|w| spec.phi(n * w)).sum::<f64>() / n
}
