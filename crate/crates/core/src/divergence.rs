//! Power (Cressie-Read) divergence generators and their convex conjugates.
//!
//! Every generator `phi` is strictly convex on its domain `(a, b)`, satisfies
//! `phi(1) = phi'(1) = 0`, and is extended by `+inf` outside the domain. The
//! conjugate `phi*(t) = sup_x { t x - phi(x) }` is finite on `(a*, b*)` with
//! `a* < 0 < b*`, `phi*(0) = 0`, `phi*'(0) = 1` and `phi*''(0) = 1`.
//!
//! | name      | gamma | dom phi    | dom phi*     | phi*(t)         |
//! |-----------|-------|------------|--------------|-----------------|
//! | KLm       | 0     | (0, inf)   | (-inf, 1)    | -log(1 - t)     |
//! | KL        | 1     | [0, inf)   | R            | e^t - 1         |
//! | ChiSqM    | -1    | (0, inf)   | (-inf, 1/2]  | 1 - sqrt(1 - 2t)|
//! | ChiSq     | 2     | R          | R            | t^2/2 + t       |
//! | Hellinger | 1/2   | [0, inf)   | (-inf, 2)    | 2t / (2 - t)    |
//!
//! Any other `gamma` goes through `phi*(t) = t x - phi(x)` with
//! `x = phi'^{-1}(t) = (1 + (gamma - 1) t)^{1/(gamma - 1)}`, which reduces to
//! `(x^gamma - 1) / gamma`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Extended-real interval with per-endpoint closedness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
        lo_closed: false,
        hi_closed: false,
    };

    pub fn new(lo: f64, lo_closed: bool, hi: f64, hi_closed: bool) -> Self {
        Interval {
            lo,
            hi,
            lo_closed: lo_closed && lo.is_finite(),
            hi_closed: hi_closed && hi.is_finite(),
        }
    }

    /// Strict interior membership.
    pub fn contains_interior(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    /// Membership honouring the closedness flags.
    pub fn contains(&self, x: f64) -> bool {
        self.contains_interior(x)
            || (self.lo_closed && x == self.lo)
            || (self.hi_closed && x == self.hi)
    }

    /// Interior shrunk by `margin` at each finite endpoint.
    pub fn contains_with_margin(&self, x: f64, margin: f64) -> bool {
        x > self.lo + margin && x < self.hi - margin
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == f64::NEG_INFINITY && self.hi == f64::INFINITY {
            return write!(f, "R");
        }
        let open = if self.lo_closed { '[' } else { '(' };
        let close = if self.hi_closed { ']' } else { ')' };
        write!(
            f,
            "{open}{}, {}{close}",
            fmt_endpoint(self.lo),
            fmt_endpoint(self.hi)
        )
    }
}

fn fmt_endpoint(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Which member of the power family a [`DivergenceSpec`] represents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    /// Modified Kullback-Leibler, gamma = 0 (empirical likelihood).
    KLm,
    /// Kullback-Leibler, gamma = 1.
    KL,
    /// Modified chi-square (Neyman), gamma = -1.
    ChiSqM,
    /// Chi-square (Pearson), gamma = 2.
    ChiSq,
    /// Hellinger, gamma = 1/2.
    Hellinger,
    /// Any other power divergence.
    Power(f64),
}

/// Shape of a generic power generator, decided once at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PowerShape {
    /// gamma < 1: essentially smooth on (0, inf), conjugate bounded above.
    BelowOne,
    /// gamma > 1, even integer: convex on the whole line.
    EvenInteger,
    /// gamma > 1 otherwise: cut at 0, conjugate is flat below -1/(gamma - 1).
    CutAtZero,
}

/// A phi-divergence generator together with its conjugate and domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSpec {
    kind: DivergenceKind,
    gamma: f64,
    primal_domain: Interval,
    conjugate_domain: Interval,
}

/// The five divergences with hard-coded conjugates.
pub const NAMED: [DivergenceKind; 5] = [
    DivergenceKind::KLm,
    DivergenceKind::KL,
    DivergenceKind::ChiSqM,
    DivergenceKind::ChiSq,
    DivergenceKind::Hellinger,
];

/// Build the power divergence `phi_gamma`; the five standard values dispatch
/// to their named forms.
pub fn make_power_divergence(gamma: f64) -> DivergenceSpec {
    let kind = if gamma == 0.0 {
        DivergenceKind::KLm
    } else if gamma == 1.0 {
        DivergenceKind::KL
    } else if gamma == -1.0 {
        DivergenceKind::ChiSqM
    } else if gamma == 2.0 {
        DivergenceKind::ChiSq
    } else if gamma == 0.5 {
        DivergenceKind::Hellinger
    } else {
        DivergenceKind::Power(gamma)
    };
    DivergenceSpec::new(kind)
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind) -> Self {
        use DivergenceKind::*;
        let inf = f64::INFINITY;
        let (gamma, primal, conj) = match kind {
            KLm => (
                0.0,
                Interval::new(0.0, false, inf, false),
                Interval::new(-inf, false, 1.0, false),
            ),
            KL => (
                1.0,
                Interval::new(0.0, true, inf, false),
                Interval::REAL_LINE,
            ),
            ChiSqM => (
                -1.0,
                Interval::new(0.0, false, inf, false),
                Interval::new(-inf, false, 0.5, true),
            ),
            ChiSq => (2.0, Interval::REAL_LINE, Interval::REAL_LINE),
            Hellinger => (
                0.5,
                Interval::new(0.0, true, inf, false),
                Interval::new(-inf, false, 2.0, false),
            ),
            Power(g) => {
                if g == 0.0 || g == 1.0 || g == -1.0 || g == 2.0 || g == 0.5 {
                    return make_power_divergence(g);
                }
                let b_star = 1.0 / (1.0 - g);
                match power_shape(g) {
                    // x^gamma blows up at 0 for gamma < 0, so the domain is open there
                    // and phi*(b*) = -1/gamma is attained as a limit.
                    PowerShape::BelowOne if g < 0.0 => (
                        g,
                        Interval::new(0.0, false, inf, false),
                        Interval::new(-inf, false, b_star, true),
                    ),
                    PowerShape::BelowOne => (
                        g,
                        Interval::new(0.0, true, inf, false),
                        Interval::new(-inf, false, b_star, false),
                    ),
                    PowerShape::EvenInteger => (g, Interval::REAL_LINE, Interval::REAL_LINE),
                    PowerShape::CutAtZero => {
                        (g, Interval::new(0.0, true, inf, false), Interval::REAL_LINE)
                    }
                }
            }
        };
        DivergenceSpec {
            kind,
            gamma,
            primal_domain: primal,
            conjugate_domain: conj,
        }
    }

    /// All five named divergences.
    pub fn named() -> Vec<DivergenceSpec> {
        NAMED.iter().map(|&k| DivergenceSpec::new(k)).collect()
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn primal_domain(&self) -> Interval {
        self.primal_domain
    }

    pub fn conjugate_domain(&self) -> Interval {
        self.conjugate_domain
    }

    pub fn name(&self) -> String {
        match self.kind {
            DivergenceKind::KLm => "KLm".into(),
            DivergenceKind::KL => "KL".into(),
            DivergenceKind::ChiSqM => "ChiSqM".into(),
            DivergenceKind::ChiSq => "ChiSq".into(),
            DivergenceKind::Hellinger => "Hellinger".into(),
            DivergenceKind::Power(g) => format!("Power({g})"),
        }
    }

    /// The generator phi, `+inf` off its domain.
    pub fn phi(&self, x: f64) -> f64 {
        if !self.primal_domain.contains(x) {
            return f64::INFINITY;
        }
        match self.kind {
            DivergenceKind::KLm => -x.ln() + x - 1.0,
            DivergenceKind::KL => {
                if x == 0.0 {
                    1.0
                } else {
                    x * x.ln() - x + 1.0
                }
            }
            DivergenceKind::ChiSqM => 0.5 * (x - 1.0).powi(2) / x,
            DivergenceKind::ChiSq => 0.5 * (x - 1.0).powi(2),
            DivergenceKind::Hellinger => 2.0 * (x.sqrt() - 1.0).powi(2),
            DivergenceKind::Power(g) => (self.pow_gamma(x) - g * x + g - 1.0) / (g * (g - 1.0)),
        }
    }

    /// phi' on the interior of the primal domain.
    pub fn phi_prime(&self, x: f64) -> f64 {
        match self.kind {
            DivergenceKind::KLm => 1.0 - 1.0 / x,
            DivergenceKind::KL => x.ln(),
            DivergenceKind::ChiSqM => 0.5 * (1.0 - 1.0 / (x * x)),
            DivergenceKind::ChiSq => x - 1.0,
            DivergenceKind::Hellinger => 2.0 - 2.0 / x.sqrt(),
            DivergenceKind::Power(g) => (signed_pow(x, g - 1.0) - 1.0) / (g - 1.0),
        }
    }

    /// phi'' on the interior of the primal domain; strictly positive there.
    pub fn phi_second(&self, x: f64) -> f64 {
        match self.kind {
            DivergenceKind::KLm => 1.0 / (x * x),
            DivergenceKind::KL => 1.0 / x,
            DivergenceKind::ChiSqM => 1.0 / (x * x * x),
            DivergenceKind::ChiSq => 1.0,
            DivergenceKind::Hellinger => x.powf(-1.5),
            DivergenceKind::Power(g) => {
                if power_shape(g) == PowerShape::EvenInteger {
                    x.powi(g as i32 - 2)
                } else {
                    x.powf(g - 2.0)
                }
            }
        }
    }

    /// phi*(t) without domain checks; callers must stay in the closed domain.
    pub fn conj(&self, t: f64) -> f64 {
        match self.kind {
            DivergenceKind::KLm => -(-t).ln_1p(),
            DivergenceKind::KL => t.exp_m1(),
            DivergenceKind::ChiSqM => 1.0 - (1.0 - 2.0 * t).sqrt(),
            DivergenceKind::ChiSq => 0.5 * t * t + t,
            DivergenceKind::Hellinger => 2.0 * t / (2.0 - t),
            DivergenceKind::Power(g) => {
                let x = self.conj_prime(t);
                if x.is_infinite() {
                    // gamma < 0 at the closed endpoint b*: x^gamma -> 0
                    return -1.0 / g;
                }
                (self.pow_gamma(x) - 1.0) / g
            }
        }
    }

    /// phi*' = (phi')^{-1}, without domain checks.
    pub fn conj_prime(&self, t: f64) -> f64 {
        match self.kind {
            DivergenceKind::KLm => 1.0 / (1.0 - t),
            DivergenceKind::KL => t.exp(),
            DivergenceKind::ChiSqM => 1.0 / (1.0 - 2.0 * t).sqrt(),
            DivergenceKind::ChiSq => 1.0 + t,
            DivergenceKind::Hellinger => 4.0 / ((2.0 - t) * (2.0 - t)),
            DivergenceKind::Power(g) => {
                let base = 1.0 + (g - 1.0) * t;
                match power_shape(g) {
                    PowerShape::BelowOne => base.powf(1.0 / (g - 1.0)),
                    PowerShape::EvenInteger => signed_pow(base, 1.0 / (g - 1.0)),
                    PowerShape::CutAtZero => {
                        if base <= 0.0 {
                            0.0
                        } else {
                            base.powf(1.0 / (g - 1.0))
                        }
                    }
                }
            }
        }
    }

    /// phi*'' = 1 / phi''(phi*'), without domain checks.
    pub fn conj_second(&self, t: f64) -> f64 {
        match self.kind {
            DivergenceKind::KLm => 1.0 / ((1.0 - t) * (1.0 - t)),
            DivergenceKind::KL => t.exp(),
            DivergenceKind::ChiSqM => (1.0 - 2.0 * t).powf(-1.5),
            DivergenceKind::ChiSq => 1.0,
            DivergenceKind::Hellinger => 8.0 / (2.0 - t).powi(3),
            DivergenceKind::Power(g) => {
                let x = self.conj_prime(t);
                match power_shape(g) {
                    // flat piece of the conjugate
                    PowerShape::CutAtZero if x == 0.0 => 0.0,
                    _ => 1.0 / self.phi_second(x),
                }
            }
        }
    }

    /// phi*(t) on the whole real line: `+inf` outside the closed domain, the
    /// limit value at a closed finite endpoint.
    pub fn conjugate_value(&self, t: f64) -> f64 {
        if t.is_nan() {
            return f64::NAN;
        }
        if !self.conjugate_domain.contains(t) {
            return f64::INFINITY;
        }
        self.conj(t)
    }

    /// `(phi*'(t), phi*''(t))` on the open conjugate domain.
    pub fn conjugate_derivatives(&self, t: f64) -> Result<(f64, f64)> {
        if !self.conjugate_domain.contains_interior(t) {
            return Err(Error::DomainError {
                value: t,
                domain: self.conjugate_domain.to_string(),
            });
        }
        Ok((self.conj_prime(t), self.conj_second(t)))
    }

    fn pow_gamma(&self, x: f64) -> f64 {
        match power_shape(self.gamma) {
            PowerShape::EvenInteger => x.powi(self.gamma as i32),
            _ => x.powf(self.gamma),
        }
    }
}

fn power_shape(g: f64) -> PowerShape {
    if g < 1.0 {
        PowerShape::BelowOne
    } else if g.fract() == 0.0 && (g as i64) % 2 == 0 && g.abs() < 1e6 {
        PowerShape::EvenInteger
    } else {
        PowerShape::CutAtZero
    }
}

/// `sign(x) |x|^p`; odd roots and odd powers of negative numbers.
fn signed_pow(x: f64, p: f64) -> f64 {
    if x < 0.0 {
        -(-x).powf(p)
    } else {
        x.powf(p)
    }
}

impl fmt::Display for DivergenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for DivergenceSpec {
    type Err = Error;

    /// Accepts the canonical names (case-insensitive), `el` for KLm,
    /// `chi2`/`chi2m`, and `power:<gamma>` or `Power(<gamma>)`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "klm" | "el" | "kl_m" => DivergenceKind::KLm,
            "kl" => DivergenceKind::KL,
            "chisqm" | "chi2m" | "chisq_m" => DivergenceKind::ChiSqM,
            "chisq" | "chi2" => DivergenceKind::ChiSq,
            "hellinger" | "h" => DivergenceKind::Hellinger,
            other => {
                let gamma = other
                    .strip_prefix("power:")
                    .or_else(|| {
                        other
                            .strip_prefix("power(")
                            .and_then(|r| r.strip_suffix(')'))
                    })
                    .and_then(|g| g.trim().parse::<f64>().ok())
                    .filter(|g| g.is_finite())
                    .ok_or_else(|| Error::UnknownDivergence(s.to_string()))?;
                return Ok(make_power_divergence(gamma));
            }
        };
        Ok(DivergenceSpec::new(kind))
    }
}

impl Serialize for DivergenceSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for DivergenceSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
