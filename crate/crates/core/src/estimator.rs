//! Outer minimization of the profile divergence `theta -> D(M_theta, P_n)`.
//!
//! One-dimensional parameters: a bracket scan on a uniform grid over the
//! parameter box, golden-section search inside the best bracket, then (for
//! models with a Jacobian) a few Newton steps on the envelope derivative
//!
//! ```text
//! dD/dtheta = -sum_i Q(X_i) f'(X_i, theta) t
//! ```
//!
//! which pins the minimizer down well below the `sqrt(eps)` floor that any
//! value-comparison search hits. Higher dimensions use restarted Nelder-Mead
//! followed by the same polish.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::dual::{solve_auto_moments, DualSolution, DualStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{initial_theta, MomentModel, Sample, ThetaBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub grid_points: usize,
    pub theta_tol: f64,
    /// Nelder-Mead starts for `d > 1`; the first is [`initial_theta`].
    pub starts: usize,
    /// Envelope-derivative Newton polish for smooth models.
    pub polish: bool,
    /// Solve KLm through the reduced `t0 = 0` dual.
    pub reduce_el: bool,
    /// Overrides the model's box rule.
    pub theta_box: Option<ThetaBox>,
    pub inner: SolverOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            grid_points: 64,
            theta_tol: 1e-9,
            starts: 5,
            polish: true,
            reduce_el: true,
            theta_box: None,
            inner: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateStatus {
    Converged,
    BoundaryHit,
    NoFeasibleRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub theta: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    /// Minimum of the profile divergence.
    pub value: f64,
    /// Inner solution at `theta_hat`.
    pub inner: DualSolution,
    pub trace: Vec<TracePoint>,
    pub status: EstimateStatus,
    /// Grid probes far from `theta_hat` whose value ties the minimum to 1e-8.
    pub near_ties: Vec<Vec<f64>>,
    pub theta_box: ThetaBox,
}

/// Evaluates the profile and records every probe.
struct Profile<'a> {
    spec: &'a DivergenceSpec,
    model: &'a MomentModel,
    sample: &'a Sample,
    opts: &'a EstimateOptions,
    trace: Vec<TracePoint>,
}

impl Profile<'_> {
    fn solve(&self, theta: &[f64]) -> Option<DualSolution> {
        let moments = self.model.moment_matrix(self.sample, theta).ok()?;
        Some(solve_auto_moments(
            self.spec,
            &moments,
            self.sample.len(),
            self.model.moment_dim(),
            &self.opts.inner,
            self.opts.reduce_el,
        ))
    }

    /// Profile value with non-converged solves mapped to `+inf`.
    fn value(&mut self, theta: &[f64]) -> f64 {
        let raw = self.solve(theta).map_or(f64::INFINITY, |s| s.value);
        self.trace.push(TracePoint {
            theta: theta.to_vec(),
            value: raw,
        });
        if raw.is_nan() {
            f64::INFINITY
        } else {
            raw
        }
    }

    /// Envelope gradient `-sum_i w_i f'_i t`, `None` off the feasible set.
    fn envelope_gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let sol = self.solve(theta)?;
        if !sol.is_converged() {
            return None;
        }
        let jac = self.model.jacobian_matrix(self.sample, theta).ok()?;
        let d = self.model.param_dim();
        let ell = self.model.moment_dim();
        let t = &sol.t_bar[1..];
        let mut grad = vec![0.0; d];
        for (i, w) in sol.weights.iter().enumerate() {
            let block = &jac[i * d * ell..(i + 1) * d * ell];
            for (k, g) in grad.iter_mut().enumerate() {
                let ft: f64 = block[k * ell..(k + 1) * ell]
                    .iter()
                    .zip(t)
                    .map(|(a, b)| a * b)
                    .sum();
                *g -= w * ft;
            }
        }
        Some(grad)
    }
}

/// `D(M_theta, P_n)`: the inner dual value, `+inf` when no feasible weights
/// exist, `NaN` when the inner solve ran out of iterations.
pub fn profile_divergence(
    spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
) -> f64 {
    profile_divergence_with(spec, model, sample, theta, &EstimateOptions::default())
}

pub fn profile_divergence_with(
    spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    opts: &EstimateOptions,
) -> f64 {
    let profile = Profile {
        spec,
        model,
        sample,
        opts,
        trace: Vec::new(),
    };
    match profile.solve(theta) {
        None => f64::INFINITY,
        Some(sol) => match sol.status {
            DualStatus::Converged => sol.value,
            DualStatus::MaxIterations => f64::NAN,
            DualStatus::NoFeasibleWeights | DualStatus::DomainCollapse => f64::INFINITY,
        },
    }
}

/// Minimum empirical divergence estimate over the parameter box.
pub fn estimate(
    spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    if sample.dim() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "sample has {} columns, model `{}` expects {}",
            sample.dim(),
            model.name(),
            model.obs_dim()
        )));
    }
    let theta_box = opts
        .theta_box
        .clone()
        .unwrap_or_else(|| model.theta_box(sample));
    if theta_box.dim() != model.param_dim() || !theta_box.is_bounded() {
        return Err(Error::Config(format!(
            "parameter box {theta_box:?} is not a bounded box in R^{}",
            model.param_dim()
        )));
    }
    let mut profile = Profile {
        spec,
        model,
        sample,
        opts,
        trace: Vec::new(),
    };
    let start = {
        let mut s = initial_theta(model, sample);
        theta_box.clamp(&mut s);
        s
    };

    let found = if model.param_dim() == 1 {
        minimize_1d(&mut profile, &theta_box, start[0], opts).map(|t| vec![t])
    } else {
        minimize_nd(&mut profile, &theta_box, &start, opts)
    };
    let Some(mut theta_hat) = found else {
        return Err(Error::NoFeasibleRegion);
    };
    let mut value = profile.value(&theta_hat);

    if opts.polish && model.has_jacobian() {
        if let Some((t, v)) = polish(&mut profile, &theta_box, &theta_hat, value, opts) {
            theta_hat = t;
            value = v;
        }
    }

    let inner = profile.solve(&theta_hat).ok_or(Error::NoFeasibleRegion)?;
    if !value.is_finite() {
        return Err(Error::NoFeasibleRegion);
    }
    let near_ties = near_ties(&profile.trace, &theta_hat, value, &theta_box, opts);
    let on_boundary = theta_hat.iter().enumerate().any(|(k, t)| {
        let tol = opts.theta_tol * (1.0 + theta_box.hi[k].abs().max(theta_box.lo[k].abs()));
        (t - theta_box.lo[k]).abs() <= tol || (theta_box.hi[k] - t).abs() <= tol
    });
    Ok(EstimateResult {
        theta_hat,
        value,
        inner,
        trace: profile.trace,
        status: if on_boundary {
            EstimateStatus::BoundaryHit
        } else {
            EstimateStatus::Converged
        },
        near_ties,
        theta_box,
    })
}

/// Grid scan plus golden-section. Ties go to the smallest theta.
fn minimize_1d(
    profile: &mut Profile<'_>,
    theta_box: &ThetaBox,
    start: f64,
    opts: &EstimateOptions,
) -> Option<f64> {
    let (lo, hi) = (theta_box.lo[0], theta_box.hi[0]);
    let k = opts.grid_points.max(3);
    let step = (hi - lo) / (k - 1) as f64;
    let grid: Vec<f64> = (0..k)
        .map(|i| if i == k - 1 { hi } else { lo + i as f64 * step })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| profile.value(&[t])).collect();

    let mut best = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b: usize| *v < values[b]) {
            best = Some(i);
        }
    }
    let (a, b, anchor) = match best {
        Some(i) => (grid[i.saturating_sub(1)], grid[(i + 1).min(k - 1)], grid[i]),
        None => {
            // feasible set narrower than the grid spacing: try the start point
            let v = profile.value(&[start]);
            if !v.is_finite() {
                return None;
            }
            ((start - step).max(lo), (start + step).min(hi), start)
        }
    };
    Some(golden_section(profile, a, b, anchor, opts.theta_tol))
}

fn golden_section(profile: &mut Profile<'_>, mut a: f64, mut b: f64, anchor: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut best = (anchor, profile.value(&[anchor]));
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = profile.value(&[c]);
    let mut fd = profile.value(&[d]);
    for (t, v) in [(c, fc), (d, fd)] {
        if v < best.1 || (v == best.1 && t < best.0) {
            best = (t, v);
        }
    }
    while (b - a) > tol {
        // both infinite: move toward the best finite point seen
        let go_left = if fc.is_infinite() && fd.is_infinite() {
            best.0 < d
        } else {
            fc <= fd
        };
        if go_left {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = profile.value(&[c]);
            if fc < best.1 || (fc == best.1 && c < best.0) {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = profile.value(&[d]);
            if fd < best.1 || (fd == best.1 && d < best.0) {
                best = (d, fd);
            }
        }
    }
    best.0
}

/// Restarted Nelder-Mead inside the box.
fn minimize_nd(
    profile: &mut Profile<'_>,
    theta_box: &ThetaBox,
    start: &[f64],
    opts: &EstimateOptions,
) -> Option<Vec<f64>> {
    let d = theta_box.dim();
    let mut starts = vec![start.to_vec()];
    // coarse lattice scan supplies the remaining starts
    let per_axis = ((opts.grid_points as f64).powf(1.0 / d as f64).ceil() as usize).max(2);
    let mut lattice: Vec<(Vec<f64>, f64)> = Vec::new();
    let total = per_axis.pow(d as u32);
    for idx in 0..total {
        let mut rem = idx;
        let theta: Vec<f64> = (0..d)
            .map(|k| {
                let i = rem % per_axis;
                rem /= per_axis;
                let h = (theta_box.hi[k] - theta_box.lo[k]) / (per_axis + 1) as f64;
                theta_box.lo[k] + (i + 1) as f64 * h
            })
            .collect();
        let v = profile.value(&theta);
        lattice.push((theta, v));
    }
    lattice.sort_by(|x, y| {
        x.1.partial_cmp(&y.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_cmp(&x.0, &y.0))
    });
    starts.extend(
        lattice
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|p| p.0.clone())
            .take(opts.starts.saturating_sub(1)),
    );

    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (t, v) = nelder_mead(profile, theta_box, s, opts.theta_tol);
        if !v.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bt, bv)) => v < *bv || (v == *bv && lex_cmp(&t, bt) == std::cmp::Ordering::Less),
        };
        if better {
            best = Some((t, v));
        }
    }
    best.map(|b| b.0)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn nelder_mead(
    profile: &mut Profile<'_>,
    theta_box: &ThetaBox,
    start: &[f64],
    tol: f64,
) -> (Vec<f64>, f64) {
    let d = start.len();
    let eval = |p: &mut Vec<f64>, profile: &mut Profile<'_>| {
        theta_box.clamp(p);
        profile.value(p)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let mut p0 = start.to_vec();
    let v0 = eval(&mut p0, profile);
    simplex.push((p0, v0));
    for k in 0..d {
        let mut p = start.to_vec();
        let h = 0.1 * (theta_box.hi[k] - theta_box.lo[k]);
        p[k] = if p[k] + h <= theta_box.hi[k] {
            p[k] + h
        } else {
            p[k] - h
        };
        let v = eval(&mut p, profile);
        simplex.push((p, v));
    }
    let max_iter = 400 * d;
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| lex_cmp(&a.0, &b.0))
        });
        let diameter = simplex
            .iter()
            .skip(1)
            .map(|(p, _)| {
                p.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter <= tol {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(p, _)| p[k]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let along = |s: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + s * (c - w))
                .collect()
        };
        let mut r = along(1.0);
        let fr = eval(&mut r, profile);
        if fr < simplex[0].1 {
            let mut e = along(2.0);
            let fe = eval(&mut e, profile);
            simplex[d] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (r, fr);
        } else {
            let mut c = if fr < worst.1 {
                along(0.5)
            } else {
                along(-0.5)
            };
            let fc = eval(&mut c, profile);
            if fc < worst.1.min(fr) {
                simplex[d] = (c, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best
                        .iter()
                        .zip(&item.0)
                        .map(|(b, x)| b + 0.5 * (x - b))
                        .collect();
                    let v = eval(&mut p, profile);
                    *item = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_cmp(&a.0, &b.0))
    });
    simplex.swap_remove(0)
}

/// Newton iterations on the envelope gradient with a finite-difference
/// Jacobian; only accepted while they stay in the box and do not raise the
/// profile beyond rounding.
fn polish(
    profile: &mut Profile<'_>,
    theta_box: &ThetaBox,
    theta: &[f64],
    value: f64,
    opts: &EstimateOptions,
) -> Option<(Vec<f64>, f64)> {
    let d = theta.len();
    let mut cur = theta.to_vec();
    let mut cur_value = value;
    let mut improved = false;
    for _ in 0..6 {
        let g = profile.envelope_gradient(&cur)?;
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let h = 1e-5 * (1.0 + cur[k].abs());
            let mut up = cur.clone();
            let mut dn = cur.clone();
            up[k] += h;
            dn[k] -= h;
            let gu = profile.envelope_gradient(&up)?;
            let gd = profile.envelope_gradient(&dn)?;
            for r in 0..d {
                jac[(r, k)] = (gu[r] - gd[r]) / (2.0 * h);
            }
        }
        let step = jac.lu().solve(&DVector::from_column_slice(&g))?;
        // the polish refines; it never relocates the minimum
        let width = (0..d)
            .map(|k| theta_box.hi[k] - theta_box.lo[k])
            .fold(0.0, f64::max);
        if step.amax() > (1e3 * opts.theta_tol).max(1e-6 * width)
            || !step.iter().all(|s| s.is_finite())
        {
            break;
        }
        let next: Vec<f64> = cur.iter().zip(step.iter()).map(|(c, s)| c - s).collect();
        if !theta_box.contains(&next) {
            break;
        }
        let v = profile.value(&next);
        if !(v <= cur_value + 1e-13 * (1.0 + cur_value.abs())) {
            break;
        }
        let moved = step.amax();
        cur = next;
        cur_value = v;
        improved = true;
        if moved <= 1e-15 * (1.0 + cur.iter().fold(0.0f64, |m, x| m.max(x.abs()))) {
            break;
        }
    }
    improved.then_some((cur, cur_value))
}

fn near_ties(
    trace: &[TracePoint],
    theta_hat: &[f64],
    value: f64,
    theta_box: &ThetaBox,
    opts: &EstimateOptions,
) -> Vec<Vec<f64>> {
    let spacing: Vec<f64> = (0..theta_box.dim())
        .map(|k| (theta_box.hi[k] - theta_box.lo[k]) / opts.grid_points.max(2) as f64)
        .collect();
    let mut ties: Vec<Vec<f64>> = trace
        .iter()
        .filter(|p| p.value.is_finite() && (p.value - value).abs() <= 1e-8)
        .filter(|p| {
            p.theta
                .iter()
                .zip(theta_hat)
                .zip(&spacing)
                .any(|((a, b), s)| (a - b).abs() > 2.0 * s)
        })
        .map(|p| p.theta.clone())
        .collect();
    ties.dedup();
    ties
}
