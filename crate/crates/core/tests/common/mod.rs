//! Independent oracles shared by the integration suites. Nothing here calls
//! the library's conjugates, dual solvers or tilt solver.
#![allow(dead_code)]

use meden::nalgebra::{DMatrix, DVector};
use meden::{DivergenceKind, MomentModel, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal_sample(seed: u64, n: usize, mean: f64, sd: f64) -> Sample {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..n)
        .map(|_| mean + sd * r.sample::<f64, _>(StandardNormal))
        .collect();
    Sample::from_values(&v).unwrap()
}

/// Closed-form generators `phi`, `phi'`, `phi''` of the named divergences.
pub fn phi(kind: DivergenceKind, x: f64) -> f64 {
    match kind {
        DivergenceKind::KLm => {
            if x > 0.0 {
                -x.ln() + x - 1.0
            } else {
                f64::INFINITY
            }
        }
        DivergenceKind::KL => {
            if x > 0.0 {
                x * x.ln() - x + 1.0
            } else if x == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        }
        DivergenceKind::ChiSqM => {
            if x > 0.0 {
                (x - 1.0).powi(2) / (2.0 * x)
            } else {
                f64::INFINITY
            }
        }
        DivergenceKind::ChiSq => 0.5 * (x - 1.0).powi(2),
        DivergenceKind::Hellinger => {
            if x >= 0.0 {
                2.0 * (x.sqrt() - 1.0).powi(2)
            } else {
                f64::INFINITY
            }
        }
        DivergenceKind::Power(_) => unreachable!(),
    }
}

pub fn phi_prime(kind: DivergenceKind, x: f64) -> f64 {
    match kind {
        DivergenceKind::KLm => 1.0 - 1.0 / x,
        DivergenceKind::KL => x.ln(),
        DivergenceKind::ChiSqM => 0.5 * (1.0 - 1.0 / (x * x)),
        DivergenceKind::ChiSq => x - 1.0,
        DivergenceKind::Hellinger => 2.0 - 2.0 / x.sqrt(),
        DivergenceKind::Power(_) => unreachable!(),
    }
}

pub fn phi_second(kind: DivergenceKind, x: f64) -> f64 {
    match kind {
        DivergenceKind::KLm => 1.0 / (x * x),
        DivergenceKind::KL => 1.0 / x,
        DivergenceKind::ChiSqM => 1.0 / (x * x * x),
        DivergenceKind::ChiSq => 1.0,
        DivergenceKind::Hellinger => x.powf(-1.5),
        DivergenceKind::Power(_) => unreachable!(),
    }
}

/// Table of conjugates `phi*(t)` with open domains `(a*, b*)`.
pub fn table_conjugate(kind: DivergenceKind, t: f64) -> f64 {
    match kind {
        DivergenceKind::KLm => -(1.0 - t).ln(),
        DivergenceKind::KL => t.exp() - 1.0,
        DivergenceKind::ChiSqM => 1.0 - (1.0 - 2.0 * t).sqrt(),
        DivergenceKind::ChiSq => 0.5 * t * t + t,
        DivergenceKind::Hellinger => 2.0 * t / (2.0 - t),
        DivergenceKind::Power(_) => unreachable!(),
    }
}

pub fn table_conjugate_domain(kind: DivergenceKind) -> (f64, f64) {
    match kind {
        DivergenceKind::KLm => (f64::NEG_INFINITY, 1.0),
        DivergenceKind::KL | DivergenceKind::ChiSq => (f64::NEG_INFINITY, f64::INFINITY),
        DivergenceKind::ChiSqM => (f64::NEG_INFINITY, 0.5),
        DivergenceKind::Hellinger => (f64::NEG_INFINITY, 2.0),
        DivergenceKind::Power(_) => unreachable!(),
    }
}

/// Primal domain lower end: every named generator lives on `[0, inf)` or `(0, inf)` except chi-square.
pub fn primal_lower(kind: DivergenceKind) -> f64 {
    match kind {
        DivergenceKind::ChiSq => f64::NEG_INFINITY,
        _ => 0.0,
    }
}

/// `k` evenly spread interior points of `(a* + 0.05, b* - 0.05)`, infinite
/// ends capped at `+-cap`.
pub fn interior_points(kind: DivergenceKind, k: usize, cap: f64) -> Vec<f64> {
    let (a, b) = table_conjugate_domain(kind);
    let lo = if a.is_finite() { a + 0.05 } else { -cap };
    let hi = if b.is_finite() { b - 0.05 } else { cap };
    (0..k)
        .map(|i| lo + (i as f64 + 0.5) * (hi - lo) / k as f64)
        .collect()
}

/// `sup_x { t x - phi(x) }` by bracketing and golden-section search on the
/// concave objective. The search runs in `log x` on positive domains.
pub fn legendre_sup(kind: DivergenceKind, t: f64) -> f64 {
    let positive = primal_lower(kind) == 0.0;
    let obj = |y: f64| {
        let x = if positive { y.exp() } else { y };
        let v = t * x - phi(kind, x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    // coarse scan, then golden-section inside the best cell
    let (lo0, hi0, k) = if positive {
        (-60.0, 60.0, 2400)
    } else {
        (-100.0, 100.0, 4000)
    };
    let cell = (hi0 - lo0) / k as f64;
    let best_i = (0..=k)
        .map(|i| (i, obj(lo0 + i as f64 * cell)))
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        )
        .0;
    let (mut lo, mut hi) = (
        lo0 + (best_i as f64 - 1.0) * cell,
        lo0 + (best_i as f64 + 1.0) * cell,
    );
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (obj(c), obj(d));
    for _ in 0..200 {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = obj(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = obj(d);
        }
    }
    let mut best = fc.max(fd);
    // the supremum of KL/Hellinger at very negative t sits at x -> 0
    if positive {
        best = best.max(-phi(kind, 0.0));
    }
    best
}

/// Minimum of `(1/n) sum phi(n q_i)` over `sum q = 1`, `sum q f_i = 0`,
/// by Newton in the null space of the constraints from a strictly feasible
/// `q0`.
pub fn primal_minimum(
    kind: DivergenceKind,
    moments: &[f64],
    n: usize,
    ell: usize,
    q0: &[f64],
) -> f64 {
    let mut a = DMatrix::zeros(ell + 1, n);
    for i in 0..n {
        a[(0, i)] = 1.0;
        for j in 0..ell {
            a[(j + 1, i)] = moments[i * ell + j];
        }
    }
    // null space of the constraint matrix from the eigenvectors of A'A
    let eig = (a.transpose() * &a).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let null_cols: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k].abs() < 1e-10 * top)
        .collect();
    let z = DMatrix::from_fn(n, null_cols.len(), |i, k| {
        eig.eigenvectors[(i, null_cols[k])]
    });

    let nf = n as f64;
    let objective = |q: &DVector<f64>| q.iter().map(|qi| phi(kind, nf * qi)).sum::<f64>() / nf;
    let in_domain = |q: &DVector<f64>| q.iter().all(|qi| nf * qi > primal_lower(kind));
    let mut q = DVector::from_column_slice(q0);
    if z.ncols() == 0 {
        return objective(&q);
    }
    let mut val = objective(&q);
    for _ in 0..200 {
        let g = DVector::from_iterator(n, q.iter().map(|qi| phi_prime(kind, nf * qi)));
        let h = DVector::from_iterator(n, q.iter().map(|qi| nf * phi_second(kind, nf * qi)));
        let gz = z.transpose() * &g;
        if gz.amax() < 1e-14 {
            break;
        }
        let hz = z.transpose() * DMatrix::from_diagonal(&h) * &z;
        let step = hz
            .cholesky()
            .expect("reduced Hessian is positive definite")
            .solve(&gz);
        let dir = -(&z * step);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..80 {
            let cand = &q + alpha * &dir;
            if in_domain(&cand) {
                let v = objective(&cand);
                if v <= val {
                    q = cand;
                    val = v;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    val
}

/// Random instance with zero in the interior of the weighted moment hull:
/// returns `(moments, q0)` with `q0 > 0`, `sum q0 = 1`, `sum q0 f = 0`.
pub fn feasible_instance(r: &mut impl Rng, n: usize, ell: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q: Vec<f64> = (0..n).map(|_| r.gen_range(0.3..1.0)).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    let mut f: Vec<f64> = (0..n * ell)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    for j in 0..ell {
        let centre: f64 = (0..n).map(|i| q[i] * f[i * ell + j]).sum();
        for i in 0..n {
            f[i * ell + j] -= centre;
        }
    }
    (f, q)
}

/// Profile minimizer by nested dense grids: 10^4 points over the box, then
/// repeated 200-point refinements around the incumbent.
pub fn dense_grid_argmin(profile: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let scan = |lo: f64, hi: f64, k: usize| -> (f64, f64) {
        let mut best = (f64::NAN, f64::INFINITY);
        for i in 0..k {
            let t = lo + (hi - lo) * i as f64 / (k - 1) as f64;
            let v = profile(t);
            if v < best.1 {
                best = (t, v);
            }
        }
        best
    };
    let (mut t, _) = scan(lo, hi, 10_000);
    let mut h = (hi - lo) / 9_999.0;
    for _ in 0..5 {
        let (a, b) = ((t - 2.0 * h).max(lo), (t + 2.0 * h).min(hi));
        t = scan(a, b, 201).0;
        h = (b - a) / 200.0;
    }
    t
}

/// Independent KL tilt for a given moment function: Newton on
/// `(1/n) sum exp(t'f_i)` with hand-rolled 2x2 algebra.
pub fn tilt_oracle(model: &MomentModel, sample: &Sample, theta: f64) -> [f64; 2] {
    assert_eq!(model.moment_dim(), 2);
    let fs: Vec<[f64; 2]> = sample
        .rows()
        .map(|x| {
            let mut out = [0.0; 2];
            model.eval_into(x, &[theta], &mut out);
            out
        })
        .collect();
    let mut t = [0.0f64; 2];
    for _ in 0..200 {
        let (mut g, mut h) = ([0.0; 2], [[0.0; 2]; 2]);
        for f in &fs {
            let e = (t[0] * f[0] + t[1] * f[1]).exp();
            for j in 0..2 {
                g[j] += f[j] * e;
                for k in 0..2 {
                    h[j][k] += f[j] * f[k] * e;
                }
            }
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        t = [t[0] - step[0], t[1] - step[1]];
        if step[0].abs().max(step[1].abs()) < 1e-15 * (1.0 + t[0].abs().max(t[1].abs())) {
            break;
        }
    }
    t
}

/// UMRE step for a one-parameter, two-moment model with every derivative
/// taken by central differences: `t'` from the tilt oracle, `f'` from `f`.
pub fn umre_fd_oracle(model: &MomentModel, sample: &Sample, theta: f64) -> (f64, f64, f64) {
    let h = 1e-5 * (1.0 + theta.abs());
    let tp = tilt_oracle(model, sample, theta + h);
    let tm = tilt_oracle(model, sample, theta - h);
    let t_prime = [(tp[0] - tm[0]) / (2.0 * h), (tp[1] - tm[1]) / (2.0 * h)];
    let t = tilt_oracle(model, sample, theta);
    let n = sample.len();
    let mut raw = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for x in sample.rows() {
        let (mut f, mut fp, mut fm) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        model.eval_into(x, &[theta], &mut f);
        model.eval_into(x, &[theta + h], &mut fp);
        model.eval_into(x, &[theta - h], &mut fm);
        let df = [(fp[0] - fm[0]) / (2.0 * h), (fp[1] - fm[1]) / (2.0 * h)];
        raw.push(t_prime[0] * f[0] + t_prime[1] * f[1] + df[0] * t[0] + df[1] * t[1]);
        w.push((t[0] * f[0] + t[1] * f[1]).exp());
    }
    let centre = raw.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    let psi: Vec<f64> = raw.iter().map(|r| r - centre).collect();
    let mean = psi.iter().sum::<f64>() / n as f64;
    let fisher = psi.iter().map(|p| p * p).sum::<f64>() / n as f64;
    (theta + mean / fisher, mean, fisher)
}

/// `|a - b| / max(1, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
