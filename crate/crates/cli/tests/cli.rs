use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meden::sim::generate_sample;
use meden::{
    builtin_model, estimate, sim, umre_correct, DivergenceSpec, EstimateOptions, Sample,
    UmreOptions,
};
use serde_json::Value;

fn meden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meden"))
        .args(args)
        .env_remove("MEDEN_THREADS")
        .output()
        .expect("spawn meden")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[derive(Clone, Copy, PartialEq)]
enum Ty {
    Str,
    Int,
    Num,
    NumVec,
    NumMat,
    Status,
}

fn matches(ty: Ty, v: &Value) -> bool {
    let nums = |v: &Value| v.as_array().is_some_and(|a| a.iter().all(Value::is_number));
    match ty {
        Ty::Str => v.is_string(),
        Ty::Int => v.is_u64(),
        Ty::Num => v.is_number(),
        Ty::NumVec => nums(v),
        Ty::NumMat => v.as_array().is_some_and(|a| a.iter().all(nums)),
        Ty::Status => matches!(
            v.as_str(),
            Some("Converged" | "BoundaryHit" | "NoFeasibleRegion")
        ),
    }
}

/// Strict check: every key is known and typed, every required key present.
fn validate(doc: &Value, schema: &[(&str, Ty, bool)]) -> Result<(), String> {
    let obj = doc.as_object().ok_or("not an object")?;
    for key in obj.keys() {
        if !schema.iter().any(|(k, _, _)| k == key) {
            return Err(format!("unknown field `{key}`"));
        }
    }
    for &(key, ty, required) in schema {
        match obj.get(key) {
            Some(v) if !matches(ty, v) => {
                return Err(format!("field `{key}` has the wrong type: {v}"))
            }
            None if required => return Err(format!("missing field `{key}`")),
            _ => {}
        }
    }
    Ok(())
}

const ESTIMATE_SCHEMA: &[(&str, Ty, bool)] = &[
    ("model", Ty::Str, true),
    ("divergence", Ty::Str, true),
    ("n", Ty::Int, true),
    ("theta_hat", Ty::NumVec, false),
    ("value", Ty::Num, false),
    ("weights", Ty::NumVec, false),
    ("status", Ty::Status, false),
    ("t_bar", Ty::NumVec, false),
    ("near_ties", Ty::NumMat, false),
    ("theta_umre", Ty::NumVec, false),
    ("correction", Ty::NumVec, false),
    ("fisher", Ty::NumMat, false),
    ("mean_score", Ty::NumVec, false),
    ("ridge", Ty::Num, false),
    ("error", Ty::Str, false),
    ("message", Ty::Str, false),
];

fn read_json(path: &Path) -> Value {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    validate(&doc, ESTIMATE_SCHEMA).unwrap_or_else(|e| panic!("{}: {e}\n{doc}", path.display()));
    doc
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn write_csv(dir: &Path, name: &str, sample: &Sample) -> String {
    let p = dir.join(name);
    fs::write(&p, sample.to_csv_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn mean_of_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "x1\n1\n2\n3\n").unwrap();
    let out = dir.path().join("e.json");
    let o = meden(&[
        "estimate",
        "--data",
        dir.path().join("d.csv").to_str().unwrap(),
        "--model",
        "mean_only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&out);
    assert!((floats(&doc["theta_hat"])[0] - 2.0).abs() < 1e-10);
    assert_eq!(doc["status"], "Converged");
    assert_eq!(doc["divergence"], "KLm");
    let err = stderr(&o);
    assert!(err.contains(&format!("meden {}", meden::VERSION)));
    assert!(err.contains("\"model\":\"mean_only\""));
}

#[test]
fn cli_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let sample = generate_sample(
        &sim::DataDistribution::Normal { mean: 1.0, sd: 1.0 },
        40,
        1,
        17,
        0,
    )
    .unwrap();
    let data = write_csv(dir.path(), "s.csv", &sample);
    let out = dir.path().join("e.json");
    let o = meden(&[
        "estimate",
        "--data",
        &data,
        "--model",
        "sim_example",
        "--divergence",
        "chisq",
        "--umre",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&out);

    // the CSV round trip is exact, so the library sees the same numbers
    let reread = Sample::from_csv_path(&data).unwrap();
    assert_eq!(reread, sample);
    let spec: DivergenceSpec = "chisq".parse().unwrap();
    let m = builtin_model("sim_example").unwrap();
    let est = estimate(&spec, &m, &reread, &EstimateOptions::default()).unwrap();
    let u = umre_correct(&spec, &m, &reread, &est, &UmreOptions::default()).unwrap();
    assert_eq!(floats(&doc["theta_hat"]), est.theta_hat);
    assert_eq!(doc["value"].as_f64().unwrap(), est.value);
    assert_eq!(floats(&doc["weights"]), est.inner.weights);
    assert_eq!(floats(&doc["theta_umre"]), u.theta_umre);
    assert_eq!(floats(&doc["correction"]), u.correction);
}

#[test]
fn umre_on_a_scale_model_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(
        dir.path(),
        "s.csv",
        &Sample::from_values(&[0.1, 0.4, 1.0, 3.0, 0.7, 2.2]).unwrap(),
    );
    let out = dir.path().join("e.json");
    let o = meden(&[
        "estimate",
        "--data",
        &data,
        "--model",
        "scale_ratio",
        "--umre",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let doc = read_json(&out);
    assert_eq!(doc["error"], "NonAdditiveGroup");
    assert!(doc.get("theta_hat").is_some());
    assert!(doc.get("theta_umre").is_none());
}

#[test]
fn infeasible_sample_reports_the_error() {
    let dir = tempfile::tempdir().unwrap();
    // a single distinct value leaves no interior point for the variance moment
    let data = write_csv(
        dir.path(),
        "s.csv",
        &Sample::from_values(&[2.0; 6]).unwrap(),
    );
    let out = dir.path().join("e.json");
    let o = meden(&[
        "estimate",
        "--data",
        &data,
        "--model",
        "sim_example",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(read_json(&out)["error"], "NoFeasibleRegion");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(
        dir.path(),
        "s.csv",
        &Sample::from_values(&[1.0, 2.0, 3.0]).unwrap(),
    );
    let out = dir.path().join("e.json");
    let o = out.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["estimate", "--data", &data, "--model", "nope", "--out", o],
        vec![
            "estimate",
            "--data",
            &data,
            "--model",
            "mean_only",
            "--divergence",
            "L1",
            "--out",
            o,
        ],
        vec![
            "estimate",
            "--data",
            "/nonexistent.csv",
            "--model",
            "mean_only",
            "--out",
            o,
        ],
        vec![
            "estimate",
            "--data",
            &data,
            "--model",
            "two_means_scale",
            "--out",
            o,
        ],
        vec!["estimate", "--model", "mean_only"],
        vec!["frobnicate"],
        vec!["conjugates", "--points", "0"],
    ];
    for args in cases {
        let r = meden(&args);
        assert_eq!(code(&r), 1, "{args:?}: {}", stderr(&r));
    }
    assert!(!out.exists());
    assert_eq!(code(&meden(&["--version"])), 0);
}

fn smoke_config(runs: usize) -> String {
    format!(
        r#"{{"model": "sim_example", "truth": [1.0], "dist": {{"kind": "Normal", "mean": 1.0, "sd": 1.0}},
            "sample_sizes": [20, 30], "runs": {runs}, "seed": 5,
            "methods": [{{"label": "EL", "divergence": "KLm"}}, {{"label": "UMRE", "divergence": "KLm", "umre": true}}]}}"#
    )
}

#[test]
fn simulate_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, smoke_config(1)).unwrap();
    let out = dir.path().join("out");
    let o = meden(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().nth(1).unwrap().starts_with("EL"));
    let csv = fs::read_to_string(out.join("mse.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,n,mse,std_error,failures"
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["version"], meden::VERSION);
    assert!(stderr(&o).contains("\"sample_sizes\":[20,30]"));
}

#[test]
fn simulate_threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, smoke_config(20)).unwrap();
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_meden"))
            .args([
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
            ])
            .env("MEDEN_THREADS", threads)
            .output()
            .unwrap();
        (code(&o), stderr(&o))
    };
    let (c1, e1) = run("1", "a");
    let (c4, e4) = run("4", "b");
    assert_eq!((c1, c4), (0, 0));
    assert!(e1.contains("\"parallelism\":1") && e4.contains("\"parallelism\":4"));
    let a = fs::read(dir.path().join("a/mse.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/mse.csv")).unwrap());
    assert_eq!(run("zero", "c").0, 1);
    assert!(!dir.path().join("c").exists());
}

#[test]
fn simulate_rejects_bad_configs_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = [
        ("{\"model\": ", "malformed"),
        (&smoke_config(0)[..], "runs"),
        (
            &smoke_config(5).replace("[20, 30]", "[]")[..],
            "sample_sizes",
        ),
        (
            &smoke_config(5).replace("\"KLm\"}", "\"L1\"}")[..],
            "methods[0].divergence",
        ),
        (&smoke_config(5).replace("\"seed\"", "\"sede\"")[..], "sede"),
    ];
    for (i, (text, field)) in bad.iter().enumerate() {
        let cfg = dir.path().join(format!("c{i}.json"));
        fs::write(&cfg, text).unwrap();
        let o = meden(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 1, "{text}");
        if *field != "malformed" {
            assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
        }
        assert!(!out.exists());
    }
}

#[test]
fn conjugate_table() {
    let o = meden(&["conjugates"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let headers: Vec<&str> = text.lines().filter(|l| l.contains("dom phi*")).collect();
    assert_eq!(headers.len(), 5);
    assert!(
        headers[0].starts_with("KLm")
            && headers[0].contains("(0, +inf)")
            && headers[0].contains("(-inf, 1)")
    );
    let chisq = headers.iter().find(|l| l.starts_with("ChiSq ")).unwrap();
    assert_eq!(chisq.matches(" R").count(), 2);
    assert_eq!(text.lines().count(), 5 * 10);

    let one = String::from_utf8(meden(&["conjugates", "--points", "1"]).stdout).unwrap();
    let values: Vec<&str> = one.lines().filter(|l| l.contains("phi*(")).collect();
    assert_eq!(values.len(), 5);
    assert!(values
        .iter()
        .all(|l| l.trim() == "phi*(+0.0000) = +0.000000000000e0"));
}

#[test]
fn shipped_study_config_gives_twelve_rows() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/el_vs_umre.json");
    let dir = tempfile::tempdir().unwrap();
    let o = meden(&[
        "simulate",
        "--config",
        cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.starts_with("EL ")).count(), 6);
    assert_eq!(rows.iter().filter(|r| r.starts_with("UMRE ")).count(), 6);
}
