//! Seeded Monte Carlo comparison of estimators over sample sizes.
//!
//! Every replicate draws one sample from its own ChaCha stream and feeds it to
//! all methods (paired design). Replicates run on a rayon pool; results come
//! back in replicate order and are reduced sequentially, so the report does
//! not depend on the pool size.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimateOptions};
use crate::model::{builtin_model, MomentModel, Sample};
use crate::umre::{umre_correct, UmreOptions};

pub const GENERATOR: &str = "ChaCha8Rng(seed_from_u64(seed), stream = n << 32 | replicate) + rand_distr::StandardNormal (ziggurat)";

/// Reserved divergence name: a stub method that returns the true parameter.
pub const TRUTH_METHOD: &str = "truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DataDistribution {
    /// Independent `N(mean, sd^2)` coordinates.
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub divergence: String,
    #[serde(default)]
    pub umre: bool,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let base = match self.divergence.parse::<DivergenceSpec>() {
            Ok(spec) => spec.name(),
            Err(_) => self.divergence.clone(),
        };
        if self.umre {
            format!("{base}+UMRE")
        } else {
            base
        }
    }
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub model: String,
    pub truth: Vec<f64>,
    pub dist: DataDistribution,
    pub sample_sizes: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl SimConfig {
    /// Parses and validates a JSON config; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = builtin_model(&self.model)
            .map_err(|_| Error::Config(format!("model: unknown model `{}`", self.model)))?;
        if self.truth.len() != model.param_dim() {
            return Err(Error::Config(format!(
                "truth: model `{}` has {} parameters, got {}",
                self.model,
                model.param_dim(),
                self.truth.len()
            )));
        }
        if self.runs < 1 {
            return Err(Error::Config("runs: must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() {
            return Err(Error::Config("sample_sizes: must not be empty".into()));
        }
        if let Some(n) = self.sample_sizes.iter().find(|&&n| n < 4) {
            return Err(Error::Config(format!(
                "sample_sizes: {n} is below the minimum of 4"
            )));
        }
        if self.parallelism < 1 {
            return Err(Error::Config("parallelism: must be at least 1".into()));
        }
        let DataDistribution::Normal { mean, sd } = self.dist;
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::Config(format!(
                "dist: need finite mean and sd > 0, got mean {mean}, sd {sd}"
            )));
        }
        let mut labels = BTreeMap::new();
        for (i, m) in self.methods.iter().enumerate() {
            if m.divergence == TRUTH_METHOD {
                if m.umre {
                    return Err(Error::Config(format!(
                        "methods[{i}].umre: not available for the `truth` stub"
                    )));
                }
            } else if m.divergence.parse::<DivergenceSpec>().is_err() {
                return Err(Error::Config(format!(
                    "methods[{i}].divergence: unknown divergence `{}`",
                    m.divergence
                )));
            }
            if labels.insert(m.label(), i).is_some() {
                return Err(Error::Config(format!(
                    "methods[{i}].label: duplicate label `{}`",
                    m.label()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub n: usize,
    pub mse: f64,
    pub std_error: f64,
    pub successes: usize,
    pub failures: usize,
    /// Failure counts keyed by error kind.
    pub failure_kinds: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub generator: String,
    pub version: String,
    pub wall_time_secs: f64,
    /// Sorted by `(method, n)`.
    pub results: Vec<MethodResult>,
}

impl SimReport {
    pub fn get(&self, method: &str, n: usize) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.n == n)
    }
}

/// Draws `n` observations of dimension `dim` from the stream
/// `(seed, replicate_index)`.
pub fn generate_sample(
    dist: &DataDistribution,
    n: usize,
    dim: usize,
    seed: u64,
    replicate_index: u64,
) -> Result<Sample> {
    let DataDistribution::Normal { mean, sd } = *dist;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate_index);
    let values: Vec<f64> = (0..n * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean + sd * z
        })
        .collect();
    let rows: Vec<Vec<f64>> = values.chunks(dim).map(<[f64]>::to_vec).collect();
    Sample::from_rows(&rows)
}

pub fn replicate_index(n: usize, replicate: usize) -> u64 {
    ((n as u64) << 32) | replicate as u64
}

/// Squared error per method, or the error kind that stopped it.
type Outcome = Vec<std::result::Result<f64, &'static str>>;

fn run_replicate(
    cfg: &SimConfig,
    model: &MomentModel,
    specs: &[Option<DivergenceSpec>],
    n: usize,
    r: usize,
) -> Outcome {
    let sample = match generate_sample(
        &cfg.dist,
        n,
        model.obs_dim(),
        cfg.seed,
        replicate_index(n, r),
    ) {
        Ok(s) => s,
        Err(e) => return vec![Err(e.kind()); cfg.methods.len()],
    };
    let sq_err = |theta: &[f64]| {
        theta
            .iter()
            .zip(&cfg.truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let opts = EstimateOptions::default();
    // one estimate per divergence, shared by its plain and corrected methods
    let mut cache: HashMap<usize, Result<crate::estimator::EstimateResult>> = HashMap::new();
    cfg.methods
        .iter()
        .zip(specs)
        .enumerate()
        .map(|(i, (method, spec))| {
            let Some(spec) = spec else {
                return Ok(sq_err(&cfg.truth));
            };
            let key = specs
                .iter()
                .position(|s| s.as_ref() == Some(spec))
                .unwrap_or(i);
            let est = cache
                .entry(key)
                .or_insert_with(|| estimate(spec, model, &sample, &opts));
            let est = est.as_ref().map_err(Error::kind)?;
            if method.umre {
                let u = umre_correct(spec, model, &sample, est, &UmreOptions::default())
                    .map_err(|e| e.kind())?;
                Ok(sq_err(&u.theta_umre))
            } else {
                Ok(sq_err(&est.theta_hat))
            }
        })
        .collect()
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let started = Instant::now();
    let model = builtin_model(&cfg.model)?;
    let specs: Vec<Option<DivergenceSpec>> = cfg
        .methods
        .iter()
        .map(|m| {
            if m.divergence == TRUTH_METHOD {
                None
            } else {
                m.divergence.parse().ok()
            }
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("parallelism: {e}")))?;

    let mut results = Vec::new();
    for &n in &cfg.sample_sizes {
        let outcomes: Vec<Outcome> = pool.install(|| {
            (0..cfg.runs)
                .into_par_iter()
                .map(|r| run_replicate(cfg, &model, &specs, n, r))
                .collect()
        });
        for (j, method) in cfg.methods.iter().enumerate() {
            let mut errors = Vec::with_capacity(cfg.runs);
            let mut failure_kinds = BTreeMap::new();
            for o in &outcomes {
                match o[j] {
                    Ok(e) => errors.push(e),
                    Err(kind) => *failure_kinds.entry(kind.to_string()).or_insert(0) += 1,
                }
            }
            let (mse, std_error) = mean_and_std_error(&errors);
            results.push(MethodResult {
                method: method.label(),
                n,
                mse,
                std_error,
                successes: errors.len(),
                failures: cfg.runs - errors.len(),
                failure_kinds,
            });
        }
    }
    results.sort_by(|a, b| a.method.cmp(&b.method).then(a.n.cmp(&b.n)));
    Ok(SimReport {
        config: cfg.clone(),
        generator: GENERATOR.to_string(),
        version: crate::VERSION.to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        results,
    })
}

/// Mean and `sd / sqrt(k)` over the `k` successful replicates.
fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

/// `mse.csv` contents: header plus one row per `(method, n)`.
pub fn mse_csv(report: &SimReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::io("mse.csv", e);
    w.write_record(["method", "n", "mse", "std_error", "failures"])
        .map_err(io)?;
    for r in &report.results {
        w.write_record([
            r.method.clone(),
            r.n.to_string(),
            format!("{:.9e}", r.mse),
            format!("{:.9e}", r.std_error),
            r.failures.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("mse.csv", e))?;
    String::from_utf8(bytes).map_err(|e| Error::io("mse.csv", e))
}

/// Writes `report.json` and `mse.csv` into `dir`, creating it if needed.
pub fn write_report(report: &SimReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = mse_csv(report)?;
    let json =
        serde_json::to_string_pretty(report).map_err(|e| Error::io(dir.join("report.json"), e))?;
    let csv_path = dir.join("mse.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
