use std::fs;
use std::path::Path;

use meden::estimator::EstimateStatus;
use meden::sim::mse_csv;
use meden::{
    builtin_model, estimate, run_simulation, umre_correct, write_report, DivergenceSpec, Error,
    EstimateOptions, Interval, Sample, SimConfig, UmreOptions,
};
use serde::Serialize;
use serde_json::json;

use crate::Failure;

const THREADS_VAR: &str = "MEDEN_THREADS";

fn classify(e: &Error) -> Failure {
    match e {
        Error::UnknownModel(_)
        | Error::UnknownDivergence(_)
        | Error::InvalidSample(_)
        | Error::Dimension(_)
        | Error::Config(_)
        | Error::Io { .. } => Failure::Usage(e.to_string()),
        _ => Failure::Numerical(e.to_string()),
    }
}

fn print_config(config: &impl Serialize) {
    match serde_json::to_string(config) {
        Ok(s) => eprintln!("config: {s}"),
        Err(e) => eprintln!("config: <unprintable: {e}>"),
    }
}

/// Fields written by `estimate`. Anything past the failure point is absent.
#[derive(Debug, Default, Serialize)]
struct EstimateOutput {
    model: String,
    divergence: String,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<EstimateStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_bar: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    near_ties: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta_umre: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fisher: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_score: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))? + "\n";
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_estimate(
    data: &Path,
    model: &str,
    divergence: &str,
    umre: bool,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let spec: DivergenceSpec = divergence.parse().map_err(|e| classify(&e))?;
    let model = builtin_model(model).map_err(|e| classify(&e))?;
    let sample = Sample::from_csv_path(data).map_err(|e| classify(&e))?;
    if sample.dim() != model.obs_dim() {
        return Err(Failure::Usage(format!(
            "{}: rows have {} columns, model `{}` expects {}",
            data.display(),
            sample.dim(),
            model.name(),
            model.obs_dim()
        )));
    }
    let opts = EstimateOptions::default();
    print_config(&json!({
        "command": "estimate",
        "data": data,
        "model": model.name(),
        "divergence": spec.name(),
        "umre": umre,
        "out": out,
        "options": opts,
    }));

    let mut output = EstimateOutput {
        model: model.name().to_string(),
        divergence: spec.name(),
        n: sample.len(),
        ..Default::default()
    };
    let outcome = estimate(&spec, &model, &sample, &opts).and_then(|est| {
        output.theta_hat = Some(est.theta_hat.clone());
        output.value = Some(est.value);
        output.weights = Some(est.inner.weights.clone());
        output.status = Some(est.status);
        output.t_bar = Some(est.inner.t_bar.clone());
        output.near_ties = Some(est.near_ties.clone());
        if umre {
            let u = umre_correct(&spec, &model, &sample, &est, &UmreOptions::default())?;
            output.theta_umre = Some(u.theta_umre);
            output.correction = Some(u.correction);
            output.fisher = Some(u.fisher);
            output.mean_score = Some(u.mean_score);
            output.ridge = Some(u.ridge);
        }
        Ok(())
    });
    match outcome {
        Ok(()) => write_json(&output, out),
        Err(e) => {
            let failure = classify(&e);
            if let Failure::Numerical(_) = failure {
                output.error = Some(e.kind());
                output.message = Some(e.to_string());
                write_json(&output, out)?;
            }
            Err(failure)
        }
    }
}

fn threads_override() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Some(k)),
            _ => Err(Failure::Usage(format!(
                "{THREADS_VAR}: expected a positive integer, got `{v}`"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Failure::Usage(format!("{THREADS_VAR}: {e}"))),
    }
}

pub fn cmd_simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let mut cfg = SimConfig::from_json(&text).map_err(|e| classify(&e))?;
    if let Some(k) = threads_override()? {
        cfg.parallelism = k;
    }
    cfg.validate().map_err(|e| classify(&e))?;
    print_config(&cfg);

    let report = run_simulation(&cfg).map_err(|e| classify(&e))?;
    write_report(&report, out).map_err(|e| classify(&e))?;
    let table = mse_csv(&report).map_err(|e| classify(&e))?;
    println!(
        "{:<16} {:>6} {:>14} {:>14} {:>9}",
        "method", "n", "mse", "std_error", "failures"
    );
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        println!(
            "{:<16} {:>6} {:>14} {:>14} {:>9}",
            f[0], f[1], f[2], f[3], f[4]
        );
    }
    eprintln!("wrote {} in {:.1}s", out.display(), report.wall_time_secs);
    Ok(())
}

/// `k` display points: symmetric about 0 (or the midpoint of a bounded
/// domain), kept strictly inside any finite end.
fn display_points(dom: Interval, k: usize) -> Vec<f64> {
    let (center, half) = if dom.lo.is_finite() && dom.hi.is_finite() {
        (0.5 * (dom.lo + dom.hi), 0.45 * (dom.hi - dom.lo))
    } else {
        let mut half: f64 = 2.0;
        for end in [dom.lo, dom.hi] {
            if end.is_finite() {
                half = half.min(0.9 * end.abs());
            }
        }
        (0.0, half)
    };
    if k == 1 {
        return vec![center];
    }
    let step = 2.0 * half / (k - 1) as f64;
    (0..k)
        .map(|j| center + (j as f64 - 0.5 * (k - 1) as f64) * step)
        .collect()
}

pub fn cmd_conjugates(points: usize) -> Result<(), Failure> {
    if points == 0 {
        return Err(Failure::Usage("--points must be at least 1".into()));
    }
    print_config(&json!({ "command": "conjugates", "points": points }));
    for spec in DivergenceSpec::named() {
        println!(
            "{:<10} dom phi = {:<12} dom phi* = {}",
            spec.name(),
            spec.primal_domain().to_string(),
            spec.conjugate_domain()
        );
        for t in display_points(spec.conjugate_domain(), points) {
            println!("    phi*({t:+.4}) = {:+.12e}", spec.conj(t));
        }
    }
    Ok(())
}
