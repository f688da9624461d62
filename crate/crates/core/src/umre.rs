//! Additive-group UMRE correction.
//!
//! The estimate `theta~` is moved by `I^-1 * mean(psi)`, where `psi` is the
//! score of the exponential tilt `exp(t(theta)' f(x, theta))` of the empirical
//! measure and `I` is the empirical second moment of that score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::error::{Error, Result};
use crate::estimator::EstimateResult;
use crate::linalg::{inf_norm, solve_psd, symmetric_condition};
use crate::model::{Group, MomentModel, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmreOptions {
    pub tilt_tol: f64,
    pub tilt_max_iter: usize,
    pub cond_cap: f64,
    /// Add `1e-8 * trace(I) / d` to the diagonal instead of failing when
    /// `cond(I) > cond_cap`.
    pub ridge: bool,
}

impl Default for UmreOptions {
    fn default() -> Self {
        UmreOptions {
            tilt_tol: 1e-10,
            tilt_max_iter: 100,
            cond_cap: 1e10,
            ridge: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiltStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub t_hat: DVector<f64>,
    /// `d x ell`: `d h_j / d theta_k` at `(theta, t_hat)`.
    pub jac_theta: DMatrix<f64>,
    /// `ell x ell` tilted Gram matrix `(1/n) sum f f' exp(t'f)`.
    pub jac_t: DMatrix<f64>,
    /// `d x ell`: derivative of `t_hat(theta)'`.
    pub t_prime: DMatrix<f64>,
    pub status: TiltStatus,
    pub iterations: usize,
    pub residual: f64,
}

impl TiltSolution {
    pub fn is_converged(&self) -> bool {
        self.status == TiltStatus::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmreResult {
    pub theta_umre: Vec<f64>,
    pub correction: Vec<f64>,
    pub fisher: Vec<Vec<f64>>,
    pub mean_score: Vec<f64>,
    pub condition: f64,
    /// Diagonal ridge added to the Fisher matrix; zero when none was needed.
    pub ridge: f64,
    pub t_hat: Vec<f64>,
}

/// `h(theta, t) = (1/n) sum f_i exp(t'f_i)` and its `t`-Jacobian, plus the
/// potential `(1/n) sum exp(t'f_i)` whose gradient is `h`.
fn tilt_moments(
    moments: &[f64],
    n: usize,
    ell: usize,
    t: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let mut pot = 0.0;
    let mut h = DVector::zeros(ell);
    let mut jt = DMatrix::zeros(ell, ell);
    for f in moments.chunks_exact(ell) {
        let e = f
            .iter()
            .zip(t.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .exp();
        pot += e;
        for j in 0..ell {
            h[j] += f[j] * e;
            for k in 0..=j {
                jt[(j, k)] += f[j] * f[k] * e;
            }
        }
    }
    for j in 0..ell {
        for k in 0..j {
            jt[(k, j)] = jt[(j, k)];
        }
    }
    let inv_n = 1.0 / n as f64;
    (pot * inv_n, h * inv_n, jt * inv_n)
}

/// Solves the empirical exponential-family system `h(theta, t) = 0` by damped
/// Newton on the convex potential, then differentiates the solution in theta.
pub fn solve_tilt(model: &MomentModel, sample: &Sample, theta: &[f64]) -> Result<TiltSolution> {
    solve_tilt_with(model, sample, theta, &UmreOptions::default())
}

pub fn solve_tilt_with(
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    opts: &UmreOptions,
) -> Result<TiltSolution> {
    if !model.has_jacobian() {
        return Err(Error::NonSmoothModel);
    }
    let n = sample.len();
    let d = model.param_dim();
    let ell = model.moment_dim();
    let moments = model.moment_matrix(sample, theta)?;
    let jac = model.jacobian_matrix(sample, theta)?;

    let mut t = DVector::zeros(ell);
    let (mut pot, mut h, mut jt) = tilt_moments(&moments, n, ell, &t);
    let mut status = TiltStatus::MaxIterations;
    let mut iterations = 0;
    while iterations <= opts.tilt_max_iter {
        // normalized by the potential: along a divergent ray h -> 0 with it
        if h.amax() <= opts.tilt_tol * pot.min(1.0) {
            status = TiltStatus::Converged;
            break;
        }
        if iterations == opts.tilt_max_iter {
            break;
        }
        iterations += 1;
        let Some((step, _)) = solve_psd(&jt, &h) else {
            break;
        };
        let slope = h.dot(&step);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &t - alpha * &step;
            let (p, th, tj) = tilt_moments(&moments, n, ell, &trial);
            // once the decrease is below rounding, a residual drop decides
            let flat = p <= pot * (1.0 + 8.0 * f64::EPSILON) && th.amax() < h.amax();
            if p.is_finite() && (p <= pot - 1e-4 * alpha * slope || flat) {
                t = trial;
                pot = p;
                h = th;
                jt = tj;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    // d h_j / d theta_k = (1/n) sum [df_j/dtheta_k + f_j (t' df/dtheta_k)] exp(t'f)
    let mut jth = DMatrix::zeros(d, ell);
    for i in 0..n {
        let f = &moments[i * ell..(i + 1) * ell];
        let fp = &jac[i * d * ell..(i + 1) * d * ell];
        let e = f
            .iter()
            .zip(t.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .exp();
        for k in 0..d {
            let dk = &fp[k * ell..(k + 1) * ell];
            let t_dk: f64 = dk.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
            for j in 0..ell {
                jth[(k, j)] += (dk[j] + f[j] * t_dk) * e;
            }
        }
    }
    jth /= n as f64;

    // t' = -J_theta J_t^-1, solved as J_t X = J_theta' (J_t symmetric)
    let mut t_prime = DMatrix::zeros(d, ell);
    if let Some(ch) = jt.clone().cholesky() {
        let x = ch.solve(&jth.transpose());
        t_prime = -x.transpose();
    } else if let Some(inv) = jt.clone().try_inverse() {
        t_prime = -(&jth * inv);
    } else {
        status = TiltStatus::MaxIterations;
    }

    Ok(TiltSolution {
        residual: h.amax(),
        t_hat: t,
        jac_theta: jth,
        jac_t: jt,
        t_prime,
        status,
        iterations,
    })
}

/// Rows `psi(X_i, theta) = t' f_i + f'_i t - (tilted mean of the same)`,
/// returned as an `n x d` matrix.
pub fn score_matrix(
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    tilt: &TiltSolution,
) -> Result<DMatrix<f64>> {
    if !tilt.is_converged() {
        return Err(Error::TiltMaxIterations(tilt.iterations));
    }
    let n = sample.len();
    let d = model.param_dim();
    let ell = model.moment_dim();
    let moments = model.moment_matrix(sample, theta)?;
    let jac = model.jacobian_matrix(sample, theta)?;
    let t = &tilt.t_hat;

    let mut raw = DMatrix::zeros(n, d);
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let f = DVector::from_column_slice(&moments[i * ell..(i + 1) * ell]);
        let fp = DMatrix::from_row_slice(d, ell, &jac[i * d * ell..(i + 1) * d * ell]);
        let row = &tilt.t_prime * &f + fp * t;
        raw.set_row(i, &row.transpose());
        weights[i] = t.dot(&f).exp();
    }
    let total: f64 = weights.iter().sum();
    for k in 0..d {
        let centre: f64 = (0..n).map(|i| weights[i] * raw[(i, k)]).sum::<f64>() / total;
        for i in 0..n {
            raw[(i, k)] -= centre;
        }
    }
    Ok(raw)
}

/// `(1/n) S'S` for an `n x d` score matrix.
pub fn fisher_empirical(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let n = scores.nrows().max(1) as f64;
    let mut fisher = scores.tr_mul(scores) / n;
    // exact symmetry regardless of the product's summation order
    let d = fisher.nrows();
    for j in 0..d {
        for k in 0..j {
            let avg = 0.5 * (fisher[(j, k)] + fisher[(k, j)]);
            fisher[(j, k)] = avg;
            fisher[(k, j)] = avg;
        }
    }
    fisher
}

/// `theta^ = theta~ + I^-1 mean(psi)` at `theta~ = est.theta_hat`.
pub fn umre_correct(
    _spec: &DivergenceSpec,
    model: &MomentModel,
    sample: &Sample,
    est: &EstimateResult,
    opts: &UmreOptions,
) -> Result<UmreResult> {
    if model.group() != Group::Additive {
        return Err(Error::NonAdditiveGroup);
    }
    if model.is_non_smooth() || !model.has_jacobian() {
        return Err(Error::NonSmoothModel);
    }
    let theta = &est.theta_hat;
    let d = theta.len();
    let tilt = solve_tilt_with(model, sample, theta, opts)?;
    let scores = score_matrix(model, sample, theta, &tilt)?;
    let fisher = fisher_empirical(&scores);
    let mean_score: DVector<f64> = scores.row_mean().transpose();
    let condition = symmetric_condition(&fisher);

    let mut ridge = 0.0;
    let correction = if mean_score.iter().all(|s| *s == 0.0) {
        DVector::zeros(d)
    } else {
        let mut system = fisher.clone();
        if !(condition <= opts.cond_cap) {
            if !opts.ridge {
                return Err(Error::SingularFisher { cond: condition });
            }
            ridge = 1e-8 * fisher.trace() / d as f64;
            if !(ridge > 0.0) {
                return Err(Error::SingularFisher { cond: condition });
            }
            for k in 0..d {
                system[(k, k)] += ridge;
            }
        }
        let solved = system
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&mean_score))
            .or_else(|| system.lu().solve(&mean_score));
        match solved {
            Some(c) if c.iter().all(|v| v.is_finite()) => c,
            _ => return Err(Error::SingularFisher { cond: condition }),
        }
    };

    let theta_umre = theta
        .iter()
        .zip(correction.iter())
        .map(|(t, c)| t + c)
        .collect();
    Ok(UmreResult {
        theta_umre,
        correction: correction.iter().copied().collect(),
        fisher: (0..d)
            .map(|j| fisher.row(j).iter().copied().collect())
            .collect(),
        mean_score: mean_score.iter().copied().collect(),
        condition,
        ridge,
        t_hat: tilt.t_hat.iter().copied().collect(),
    })
}

/// Largest `|h_j(theta, t)|`, used by tests to check the tilt.
pub fn tilt_residual(
    model: &MomentModel,
    sample: &Sample,
    theta: &[f64],
    t: &[f64],
) -> Result<f64> {
    let moments = model.moment_matrix(sample, theta)?;
    let ell = model.moment_dim();
    let (_, h, _) = tilt_moments(&moments, sample.len(), ell, &DVector::from_column_slice(t));
    Ok(inf_norm(h.as_slice()))
}
