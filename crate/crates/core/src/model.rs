//! Moment condition models `E f(X, theta) = 0`, samples, and the built-in
//! example models.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `f(x, theta)` written into an output slice of length `ell`.
pub type MomentFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// `d f(x, theta)^T / d theta` written row-major into a `d x ell` slice:
/// `out[k * ell + j] = d f_j / d theta_k`.
pub type JacobianFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Action of a one-parameter group element on observations or parameters.
pub type ActionFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Additive,
    Multiplicative,
    None,
}

/// How strongly the model is invariant under its group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvarianceLevel {
    /// `f(g x, g_bar theta) = f(x, theta)` pointwise.
    Moments,
    /// Only the constraint sets coincide: `f(g x, g_bar theta) = A f(x, theta)`
    /// for an invertible `A` depending on `(g, theta)`.
    Model,
}

/// Axis-aligned parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bounds must have equal length");
        ThetaBox { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(t, (a, b))| t >= a && t <= b)
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (t, (a, b)) in theta.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *t = t.clamp(*a, *b);
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
            && self.lo.iter().zip(&self.hi).all(|(a, b)| a < b)
    }
}

/// Where the parameter box and starting point come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BoxRule {
    Fixed(ThetaBox),
    /// Location parameters: `theta_k` lives on the scale of the pooled data
    /// columns listed for it. Box `[min - 5 sd, max + 5 sd]`, start at the mean.
    Location(Vec<Vec<usize>>),
    /// Positive scale parameters: box `[s / 10, 10 s]` with `s` the pooled mean
    /// absolute value of the listed columns.
    Scale(Vec<Vec<usize>>),
}

#[derive(Clone)]
struct GroupAction {
    kind: Group,
    level: InvarianceLevel,
    act_x: ActionFn,
    act_theta: ActionFn,
}

/// A moment condition model.
#[derive(Clone)]
pub struct MomentModel {
    name: String,
    obs_dim: usize,
    param_dim: usize,
    moment_dim: usize,
    f: MomentFn,
    jac: Option<JacobianFn>,
    action: Option<GroupAction>,
    box_rule: BoxRule,
    non_smooth: bool,
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("m", &self.obs_dim)
            .field("d", &self.param_dim)
            .field("ell", &self.moment_dim)
            .field("group", &self.group())
            .field("has_jacobian", &self.jac.is_some())
            .field("non_smooth", &self.non_smooth)
            .finish()
    }
}

impl MomentModel {
    /// A model with the given dimensions and moment map. The box defaults to
    /// `[-10, 10]^d`; no group, no Jacobian.
    pub fn new(
        name: impl Into<String>,
        obs_dim: usize,
        param_dim: usize,
        moment_dim: usize,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if obs_dim == 0 || param_dim == 0 || moment_dim == 0 {
            return Err(Error::Dimension("model dimensions must be positive".into()));
        }
        if moment_dim < param_dim {
            return Err(Error::Dimension(format!(
                "need at least as many moments as parameters (ell = {moment_dim} < d = {param_dim})"
            )));
        }
        Ok(MomentModel {
            name: name.into(),
            obs_dim,
            param_dim,
            moment_dim,
            f: Arc::new(f),
            jac: None,
            action: None,
            box_rule: BoxRule::Fixed(ThetaBox::new(vec![-10.0; param_dim], vec![10.0; param_dim])),
            non_smooth: false,
        })
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn with_group(
        mut self,
        kind: Group,
        level: InvarianceLevel,
        act_x: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
        act_theta: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.action = if kind == Group::None {
            None
        } else {
            Some(GroupAction {
                kind,
                level,
                act_x: Arc::new(act_x),
                act_theta: Arc::new(act_theta),
            })
        };
        self
    }

    pub fn with_box_rule(mut self, rule: BoxRule) -> Self {
        self.box_rule = rule;
        self
    }

    pub fn with_box(self, theta_box: ThetaBox) -> Self {
        self.with_box_rule(BoxRule::Fixed(theta_box))
    }

    /// Indicator-type moments: usable for estimation, refused by the UMRE step.
    pub fn non_smooth(mut self) -> Self {
        self.non_smooth = true;
        self.jac = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn param_dim(&self) -> usize {
        self.param_dim
    }
    pub fn moment_dim(&self) -> usize {
        self.moment_dim
    }
    pub fn is_non_smooth(&self) -> bool {
        self.non_smooth || self.jac.is_none()
    }
    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }
    pub fn box_rule(&self) -> &BoxRule {
        &self.box_rule
    }

    pub fn group(&self) -> Group {
        self.action.as_ref().map_or(Group::None, |a| a.kind)
    }

    pub fn invariance_level(&self) -> Option<InvarianceLevel> {
        self.action.as_ref().map(|a| a.level)
    }

    /// `g(x)` for the group element with parameter `g`.
    pub fn act_on_obs(&self, x: &[f64], g: f64) -> Option<Vec<f64>> {
        self.action.as_ref().map(|a| (a.act_x)(x, g))
    }

    /// `g_bar(theta)` for the group element with parameter `g`.
    pub fn act_on_theta(&self, theta: &[f64], g: f64) -> Option<Vec<f64>> {
        self.action.as_ref().map(|a| (a.act_theta)(theta, g))
    }

    /// Raw evaluation into `out`, no finiteness check.
    pub fn eval_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.f)(x, theta, out)
    }

    /// Raw Jacobian evaluation (`d x ell`, row-major) into `out`.
    pub fn jacobian_into(&self, x: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let jac = self.jac.as_ref().ok_or(Error::NonSmoothModel)?;
        jac(x, theta, out);
        Ok(())
    }

    /// All moment vectors at `theta`, row-major `n x ell`.
    pub fn moment_matrix(&self, sample: &Sample, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(sample, theta)?;
        let ell = self.moment_dim;
        let mut out = vec![0.0; sample.len() * ell];
        for (i, row) in sample.rows().enumerate() {
            (self.f)(row, theta, &mut out[i * ell..(i + 1) * ell]);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment {
                theta: theta.to_vec(),
            });
        }
        Ok(out)
    }

    /// All Jacobians at `theta`, `n` blocks of `d x ell`.
    pub fn jacobian_matrix(&self, sample: &Sample, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(sample, theta)?;
        let block = self.param_dim * self.moment_dim;
        let mut out = vec![0.0; sample.len() * block];
        for (i, row) in sample.rows().enumerate() {
            self.jacobian_into(row, theta, &mut out[i * block..(i + 1) * block])?;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment {
                theta: theta.to_vec(),
            });
        }
        Ok(out)
    }

    fn check_dims(&self, sample: &Sample, theta: &[f64]) -> Result<()> {
        if sample.dim() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "sample has {} columns, model `{}` expects {}",
                sample.dim(),
                self.name,
                self.obs_dim
            )));
        }
        if theta.len() != self.param_dim {
            return Err(Error::Dimension(format!(
                "theta has length {}, model `{}` expects {}",
                theta.len(),
                self.name,
                self.param_dim
            )));
        }
        Ok(())
    }

    /// Parameter box for this sample.
    pub fn theta_box(&self, sample: &Sample) -> ThetaBox {
        match &self.box_rule {
            BoxRule::Fixed(b) => b.clone(),
            BoxRule::Location(cols) => {
                let (lo, hi) = cols
                    .iter()
                    .map(|c| {
                        let v = sample.pooled(c);
                        let (min, max) = min_max(&v);
                        let sd = std_dev(&v);
                        // a degenerate sample still needs a nonempty box
                        let pad = if sd > 0.0 {
                            5.0 * sd
                        } else {
                            1.0 + min.abs().max(max.abs())
                        };
                        (min - pad, max + pad)
                    })
                    .unzip();
                ThetaBox::new(lo, hi)
            }
            BoxRule::Scale(cols) => {
                let (lo, hi) = cols
                    .iter()
                    .map(|c| {
                        let v = sample.pooled(c);
                        let s = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
                        let s = if s > 0.0 { s } else { 1.0 };
                        (s / 10.0, 10.0 * s)
                    })
                    .unzip();
                ThetaBox::new(lo, hi)
            }
        }
    }
}

/// Evaluate `f(x, theta)`, failing on non-finite output.
pub fn evaluate_moments(model: &MomentModel, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.obs_dim() || theta.len() != model.param_dim() {
        return Err(Error::Dimension(format!(
            "expected x in R^{} and theta in R^{}",
            model.obs_dim(),
            model.param_dim()
        )));
    }
    let mut out = vec![0.0; model.moment_dim()];
    model.eval_into(x, theta, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMoment {
            theta: theta.to_vec(),
        });
    }
    Ok(out)
}

/// Starting point for the outer search: pooled sample means for location
/// models, the box center otherwise.
pub fn initial_theta(model: &MomentModel, sample: &Sample) -> Vec<f64> {
    match model.box_rule() {
        BoxRule::Location(cols) => cols
            .iter()
            .map(|c| {
                let v = sample.pooled(c);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect(),
        _ => model.theta_box(sample).center(),
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// An i.i.d. sample `X_1, ..., X_n` in `R^m`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    dim: usize,
    data: Vec<f64>,
}

impl Sample {
    /// Builds a sample from rows; requires `n >= 2`, equal row lengths and
    /// finite entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidSample(format!(
                "need at least 2 observations, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidSample(
                "observations must have at least one coordinate".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidSample(format!(
                    "row {i} has {} columns, expected {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSample(format!(
                    "row {i} has a non-finite entry"
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Sample { dim, data })
    }

    /// One-dimensional sample.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Sample::from_rows(&rows)
    }

    /// Reads CSV: one observation per row, numeric columns, optional header
    /// line `x1,...,xm`.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidSample(e.to_string()))?;
            if i == 0 && is_header(&rec) {
                continue;
            }
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::InvalidSample(format!("line {}: `{s}` is not a number", i + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Sample::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Sample::from_csv_reader(file)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// All entries of the given columns, concatenated.
    pub fn pooled(&self, cols: &[usize]) -> Vec<f64> {
        self.rows()
            .flat_map(|r| cols.iter().map(move |&c| r[c]))
            .collect()
    }

    /// Applies `map` to every observation.
    pub fn map_rows(&self, map: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.rows().map(map).collect();
        Sample::from_rows(&rows)
    }

    /// Rows permuted by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &i in perm {
            data.extend_from_slice(self.row(i));
        }
        Sample {
            dim: self.dim,
            data,
        }
    }
}

fn is_header(rec: &csv::StringRecord) -> bool {
    rec.iter().any(|s| s.parse::<f64>().is_err())
        && rec
            .iter()
            .enumerate()
            .all(|(j, s)| s.eq_ignore_ascii_case(&format!("x{}", j + 1)))
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: &[&str] = &[
    "sim_example",
    "mean_only",
    "mean_variance_link",
    "mean_variance_link_scale",
    "two_means",
    "two_means_scale",
    "interval_probs",
    "mean_and_quantile",
    "zero_mean_quantile",
    "location_h",
    "scale_ratio",
];

const STD_NORMAL_WITHIN_ONE: f64 = 0.682_689_492_137_085_9;

/// Looks up one of the built-in example models.
pub fn builtin_model(name: &str) -> Result<MomentModel> {
    let shift = |x: &[f64], a: f64| x.iter().map(|v| v + a).collect::<Vec<f64>>();
    let scale = |x: &[f64], l: f64| x.iter().map(|v| v * l).collect::<Vec<f64>>();
    let loc1 = || BoxRule::Location(vec![vec![0]]);

    let model = match name {
        // f = (x - theta, (x - theta)^2 - 1)
        "sim_example" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            let u = x[0] - t[0];
            out[0] = u;
            out[1] = u * u - 1.0;
        })?
        .with_jacobian(|x, t, out| {
            let u = x[0] - t[0];
            out[0] = -1.0;
            out[1] = -2.0 * u;
        })
        .with_group(Group::Additive, InvarianceLevel::Moments, shift, shift)
        .with_box_rule(loc1()),

        "mean_only" => MomentModel::new(name, 1, 1, 1, |x, t, out| out[0] = x[0] - t[0])?
            .with_jacobian(|_, _, out| out[0] = -1.0)
            .with_group(Group::Additive, InvarianceLevel::Moments, shift, shift)
            .with_box_rule(loc1()),

        // E X = theta, E X^2 = theta^2 + 1
        "mean_variance_link" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            out[0] = x[0] - t[0];
            out[1] = x[0] * x[0] - t[0] * t[0] - 1.0;
        })?
        .with_jacobian(|_, t, out| {
            out[0] = -1.0;
            out[1] = -2.0 * t[0];
        })
        .with_group(Group::Additive, InvarianceLevel::Model, shift, shift)
        .with_box_rule(loc1()),

        // E X = theta, E X^2 = 2 theta^2
        "mean_variance_link_scale" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            out[0] = x[0] - t[0];
            out[1] = x[0] * x[0] - 2.0 * t[0] * t[0];
        })?
        .with_jacobian(|_, t, out| {
            out[0] = -1.0;
            out[1] = -4.0 * t[0];
        })
        .with_group(Group::Multiplicative, InvarianceLevel::Model, scale, scale)
        .with_box_rule(loc1()),

        "two_means" => MomentModel::new(name, 2, 1, 2, |x, t, out| {
            out[0] = x[0] - t[0];
            out[1] = x[1] - t[0];
        })?
        .with_jacobian(|_, _, out| {
            out[0] = -1.0;
            out[1] = -1.0;
        })
        .with_group(Group::Additive, InvarianceLevel::Moments, shift, shift)
        .with_box_rule(BoxRule::Location(vec![vec![0, 1]])),

        // same moments, scale group: f(lx, lt) = l f(x, t)
        "two_means_scale" => MomentModel::new(name, 2, 1, 2, |x, t, out| {
            out[0] = x[0] - t[0];
            out[1] = x[1] - t[0];
        })?
        .with_jacobian(|_, _, out| {
            out[0] = -1.0;
            out[1] = -1.0;
        })
        .with_group(Group::Multiplicative, InvarianceLevel::Model, scale, scale)
        .with_box_rule(BoxRule::Location(vec![vec![0, 1]])),

        // P(X - theta < 0) = 1/2, P(|X - theta| < 1) = 0.6827
        "interval_probs" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            let u = x[0] - t[0];
            out[0] = indicator(u < 0.0) - 0.5;
            out[1] = indicator(u > -1.0 && u < 1.0) - STD_NORMAL_WITHIN_ONE;
        })?
        .non_smooth()
        .with_group(Group::Additive, InvarianceLevel::Moments, shift, shift)
        .with_box_rule(loc1()),

        // theta = (mean, median) with unit variance
        "mean_and_quantile" => MomentModel::new(name, 1, 2, 3, |x, t, out| {
            out[0] = x[0] - t[0];
            out[1] = x[0] * x[0] - 1.0 - t[0] * t[0];
            out[2] = indicator(x[0] <= t[1]) - 0.5;
        })?
        .non_smooth()
        .with_group(Group::Additive, InvarianceLevel::Model, shift, shift)
        .with_box_rule(BoxRule::Location(vec![vec![0], vec![0]])),

        // E X = 0, theta the median
        "zero_mean_quantile" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            out[0] = x[0];
            out[1] = indicator(x[0] <= t[0]) - 0.5;
        })?
        .non_smooth()
        .with_group(Group::Multiplicative, InvarianceLevel::Model, scale, scale)
        .with_box_rule(loc1()),

        // f = h(x - theta) with h(u) = (u, u^3): symmetric location
        "location_h" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            let u = x[0] - t[0];
            out[0] = u;
            out[1] = u * u * u;
        })?
        .with_jacobian(|x, t, out| {
            let u = x[0] - t[0];
            out[0] = -1.0;
            out[1] = -3.0 * u * u;
        })
        .with_group(Group::Additive, InvarianceLevel::Moments, shift, shift)
        .with_box_rule(loc1()),

        // f = h(x / theta) with h(u) = (u - 1, u^2 - 2): exponential scale
        "scale_ratio" => MomentModel::new(name, 1, 1, 2, |x, t, out| {
            let u = x[0] / t[0];
            out[0] = u - 1.0;
            out[1] = u * u - 2.0;
        })?
        .with_jacobian(|x, t, out| {
            let u = x[0] / t[0];
            out[0] = -u / t[0];
            out[1] = -2.0 * u * u / t[0];
        })
        .with_group(
            Group::Multiplicative,
            InvarianceLevel::Moments,
            scale,
            scale,
        )
        .with_box_rule(BoxRule::Scale(vec![vec![0]])),

        other => return Err(Error::UnknownModel(other.to_string())),
    };
    Ok(model)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// One failed invariance probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Row probed; `None` when the probe used the whole sample.
    pub row: Option<usize>,
    pub theta: Vec<f64>,
    pub group_param: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub level: InvarianceLevel,
    pub trials: usize,
    pub max_deviation: f64,
    pub violations: Vec<Violation>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Probes the model's group invariance on random `(x, theta, g)` draws.
///
/// For pointwise-invariant models the deviation is
/// `max |f(g x, g_bar theta) - f(x, theta)|`. For model-level invariance the
/// moment vectors over the whole sample are regressed on each other,
/// `F_g ~ F A^T`, and the deviation is the largest residual relative to
/// `1 + max |F_g|`; an exactly linear, invertible `A` means both parameter
/// values carve out the same set of reweightings of the sample.
pub fn check_invariance(
    model: &MomentModel,
    sample: &Sample,
    trials: usize,
    tol: f64,
) -> Result<InvarianceReport> {
    let level = model.invariance_level().ok_or_else(|| {
        Error::Config(format!(
            "model `{}` declares no group; nothing to check",
            model.name()
        ))
    })?;
    let group = model.group();
    let theta_box = model.theta_box(sample);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a2b_3c4d);
    let ell = model.moment_dim();
    let mut report = InvarianceReport {
        level,
        trials,
        max_deviation: 0.0,
        violations: Vec::new(),
    };

    for _ in 0..trials {
        let theta: Vec<f64> = theta_box
            .lo
            .iter()
            .zip(&theta_box.hi)
            .map(|(a, b)| rng.gen_range(*a..=*b))
            .collect();
        let g = match group {
            Group::Additive => rng.gen_range(-10.0..10.0),
            Group::Multiplicative => 10f64.powf(rng.gen_range(-1.0..1.0)),
            Group::None => unreachable!("checked above"),
        };
        let g_theta = model.act_on_theta(&theta, g).expect("group present");
        let (row, deviation) = match level {
            InvarianceLevel::Moments => {
                let i = rng.gen_range(0..sample.len());
                let x = sample.row(i);
                let gx = model.act_on_obs(x, g).expect("group present");
                let mut a = vec![0.0; ell];
                let mut b = vec![0.0; ell];
                model.eval_into(x, &theta, &mut a);
                model.eval_into(&gx, &g_theta, &mut b);
                let dev = a
                    .iter()
                    .zip(&b)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                (Some(i), dev)
            }
            InvarianceLevel::Model => {
                let moved = sample.map_rows(|x| model.act_on_obs(x, g).expect("group present"))?;
                let base = model.moment_matrix(sample, &theta)?;
                let image = model.moment_matrix(&moved, &g_theta)?;
                (
                    None,
                    linear_equivalence_residual(&base, &image, sample.len(), ell),
                )
            }
        };
        let deviation = if deviation.is_nan() {
            f64::INFINITY
        } else {
            deviation
        };
        report.max_deviation = report.max_deviation.max(deviation);
        if deviation > tol {
            report.violations.push(Violation {
                row,
                theta,
                group_param: g,
                deviation,
            });
        }
    }
    Ok(report)
}

/// Residual of the least-squares fit `image ~ base * A^T`, relative to the
/// scale of `image`; infinite if `A` is singular.
fn linear_equivalence_residual(base: &[f64], image: &[f64], n: usize, ell: usize) -> f64 {
    let f = DMatrix::from_row_slice(n, ell, base);
    let g = DMatrix::from_row_slice(n, ell, image);
    let svd = f.clone().svd(true, true);
    let Ok(a_t) = svd.solve(&g, 1e-14) else {
        return f64::INFINITY;
    };
    let resid = &g - &f * &a_t;
    let scale = 1.0 + g.amax();
    let sv = a_t.clone().singular_values();
    if sv.min() <= 1e-12 * sv.max().max(1.0) {
        return f64::INFINITY;
    }
    resid.amax() / scale
}
