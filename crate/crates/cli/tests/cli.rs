use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histodyn_core::RngStream;
use serde_json::Value;

fn histodyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histodyn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = histodyn(args);
    assert!(out.status.success(), "histodyn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

/// Three correlated columns for `units` units over 20 years. `skip` drops
/// years of unit 1; `jump` adds a shift to every column of unit 0 from that year on.
fn write_panel(path: &Path, units: usize, skip: &[usize], jump: Option<usize>) {
    let mut rng = RngStream::new(21, 0);
    let mut text = String::from("country,year,a,b,c\n");
    for u in 0..units {
        let (mut p, mut q) = (rng.normal(), rng.normal());
        for year in 0..20 {
            p = 0.9 * p + 0.3 * rng.normal();
            q = 0.8 * q + 0.3 * rng.normal();
            if u == 1 && skip.contains(&year) {
                continue;
            }
            let shift = if u == 0 && jump.is_some_and(|j| year >= j) { 8.0 } else { 0.0 };
            let (a, b, c) = (p + shift, q + shift, 0.5 * p - q + 0.2 * rng.normal() + shift);
            text.push_str(&format!("C{u},{},{a:.6},{b:.6},{c:.6}\n", 2000 + year));
        }
    }
    std::fs::write(path, text).unwrap();
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new(units: usize, skip: &[usize], jump: Option<usize>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        write_panel(&root.join("raw.csv"), units, skip, jump);
        ok(&["ingest", "--input", &s(&root.join("raw.csv")), "--unit-col", "country", "--time-col", "year", "--out", &s(&root)]);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        s(&self.root.join(name))
    }

    fn fit_npsde(&self, iterations: &str) {
        ok(&[
            "fit", "--panel", &self.path("panel.json"), "--estimator", "npsde", "--iterations", iterations, "--samples", "8",
            "--inducing-per-dim", "3", "--seed", "1", "--out", &s(&self.root),
        ]);
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.root.join(name)).unwrap()).unwrap()
    }

    /// Data rows of a CSV output, header first, comment line stripped.
    fn csv(&self, name: &str) -> Vec<Vec<String>> {
        let text = std::fs::read_to_string(self.root.join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config_hash="));
        lines.map(|l| l.split(',').map(str::to_owned).collect()).collect()
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = histodyn(&["ingest", "--input", &s(&dir.path().join("nope.csv")), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn unknown_column_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(&dir.path().join("raw.csv"), 3, &[], None);
    let out = histodyn(&["ingest", "--input", &s(&dir.path().join("raw.csv")), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unit"));
}

#[test]
fn non_finite_model_exits_with_numerical_code() {
    let run = Run::new(4, &[], None);
    run.fit_npsde("5");
    let mut model = run.json("model.json");
    for b in model["fitted"]["model"]["inducing"]["amplitude_values"].as_array_mut().unwrap() {
        *b = Value::from(1e200);
    }
    std::fs::write(run.root.join("broken.json"), serde_json::to_vec(&model).unwrap()).unwrap();
    let out = histodyn(&[
        "diagnose", "--model", &run.path("broken.json"), "--panel", &run.path("panel.json"), "--skip-tail", "--out",
        &run.path("diag"),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pca_report_with_all_components_explains_everything() {
    let run = Run::new(5, &[], None);
    let report = run.json("pca_report.json");
    let ratios: Vec<f64> =
        report["explained_variance_ratio"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(ratios.len(), 3);
    assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(report["format_version"], 1);
}

#[test]
fn cumulative_sigma_is_running_sum_per_unit() {
    let run = Run::new(4, &[], None);
    run.fit_npsde("5");
    ok(&[
        "diagnose", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--skip-tail", "--out",
        &s(&run.root),
    ]);
    let rows = run.csv("diagnostics.csv");
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (unit, sigma, cum) = (col("unit"), col("sigma"), col("sigma_cum"));
    let mut running = 0.0;
    let mut current = String::new();
    for row in &rows[1..] {
        if row[unit] != current {
            current = row[unit].clone();
            running = 0.0;
        }
        running += row[sigma].parse::<f64>().unwrap();
        assert!((row[cum].parse::<f64>().unwrap() - running).abs() < 1e-9 * (1.0 + running.abs()));
    }
    assert_eq!(rows.len() - 1, 4 * 19);
}

#[test]
fn injected_jump_has_smallest_tail_probability() {
    let run = Run::new(5, &[], Some(12));
    run.fit_npsde("30");
    ok(&[
        "diagnose", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--samples", "2000", "--out",
        &s(&run.root),
    ]);
    let rows = run.csv("diagnostics.csv");
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (unit, t, tail, s_tilde) = (col("unit"), col("t"), col("tail_prob"), col("s_tilde"));
    let body = &rows[1..];
    let by = |c: usize| {
        body.iter().min_by(|a, b| a[c].parse::<f64>().unwrap().total_cmp(&b[c].parse::<f64>().unwrap())).unwrap()
    };
    let rarest = by(tail);
    assert_eq!((rarest[unit].as_str(), rarest[t].as_str()), ("C0", "2011"));
    let most_surprising =
        body.iter().max_by(|a, b| a[s_tilde].parse::<f64>().unwrap().total_cmp(&b[s_tilde].parse::<f64>().unwrap()));
    assert_eq!(most_surprising.unwrap()[t], "2011");
}

#[test]
fn imputation_without_gaps_writes_header_only() {
    let run = Run::new(4, &[], None);
    run.fit_npsde("5");
    ok(&["impute", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--out", &s(&run.root)]);
    let rows = run.csv("imputation.csv");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "unit");
}

#[test]
fn imputation_fills_every_missing_year() {
    let run = Run::new(4, &[8, 9, 10], None);
    run.fit_npsde("5");
    ok(&[
        "impute", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--samples", "500", "--out",
        &s(&run.root),
    ]);
    let rows = run.csv("imputation.csv");
    let times: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(times, ["2008", "2009", "2010"]);
    assert!(rows[1..].iter().all(|r| r[0] == "C1"));
    let ess = rows[0].iter().position(|h| h == "ess").unwrap();
    for row in &rows[1..] {
        let value: f64 = row[ess].parse().unwrap();
        assert!((1.0..=500.0).contains(&value), "ess {value}");
    }
}

#[test]
fn validation_reports_a_verdict() {
    let run = Run::new(6, &[], None);
    run.fit_npsde("10");
    ok(&[
        "validate", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--max-lag", "5", "--out",
        &s(&run.root),
    ]);
    let report = run.json("validation.json");
    assert!(["pass", "fail"].contains(&report["verdict"].as_str().unwrap()));
    assert_eq!(report["data_acf"].as_array().unwrap().len(), 3);
    assert_eq!(report["max_lag"], 5);
}

#[test]
fn lag_beyond_the_series_is_a_usage_error() {
    let run = Run::new(4, &[], None);
    run.fit_npsde("5");
    let out = histodyn(&[
        "validate", "--model", &run.path("model.json"), "--panel", &run.path("panel.json"), "--max-lag", "500", "--out",
        &s(&run.root),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_only_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("raw.csv"), "country,year,a,b\n").unwrap();
    let out = histodyn(&[
        "ingest", "--input", &s(&dir.path().join("raw.csv")), "--unit-col", "country", "--time-col", "year", "--out",
        &s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_records_missing_years_as_gaps() {
    let run = Run::new(3, &[5, 6], None);
    let panel = run.json("panel.json");
    let gaps = panel["panel"]["gaps"].as_array().unwrap();
    assert_eq!(gaps.len(), 1, "{gaps:?}");
}

#[test]
fn npsde_objective_improves() {
    let run = Run::new(5, &[], None);
    run.fit_npsde("50");
    let log = run.json("fit_log.json");
    let obj: Vec<f64> = log["log"]["objective"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(obj.len(), 50);
    let head = obj[..5].iter().sum::<f64>() / 5.0;
    let tail = obj[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "negative log posterior went from {head} to {tail}");
}

#[test]
fn outputs_carry_the_same_stamp_for_the_same_inputs() {
    let a = Run::new(4, &[], None);
    let b = Run::new(4, &[], None);
    a.fit_npsde("5");
    b.fit_npsde("5");
    assert_eq!(a.json("model.json"), b.json("model.json"));
    assert_eq!(a.json("panel.json")["config_hash"], b.json("panel.json")["config_hash"]);
    let hash = a.json("model.json")["config_hash"].as_str().unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    ok(&[
        "fit", "--panel", &a.path("panel.json"), "--estimator", "npsde", "--iterations", "5", "--samples", "8",
        "--inducing-per-dim", "3", "--seed", "2", "--out", &a.path("other"),
    ]);
    let other: Value = serde_json::from_slice(&std::fs::read(a.root.join("other/model.json")).unwrap()).unwrap();
    assert_ne!(other["config_hash"], Value::from(hash));
}

#[test]
fn simulate_from_start_state_writes_every_path() {
    let run = Run::new(4, &[], None);
    run.fit_npsde("5");
    ok(&[
        "simulate", "--model", &run.path("model.json"), "--x0", "-0.5,0.2,0.1", "--horizon", "3", "--paths", "4", "--out",
        &s(&run.root),
    ]);
    let rows = run.csv("simulation.csv");
    assert_eq!(rows[0], ["unit", "path", "t", "x0", "x1", "x2"]);
    assert_eq!(rows.len() - 1, 4 * 4);
}
