use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn leap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leap"))
        .args(args)
        .current_dir(dir)
        .env("LEAP_ARTIFACT_ROOT", dir.join("artifacts"))
        .output()
        .expect("leap runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = leap(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 10] = ["--area-km2", "0.5", "--macros", "4", "--picos", "1", "--density", "200", "--seed", "3"];

#[test]
fn stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut gen = vec!["generate"];
    gen.extend(SMALL);
    ok(d, &gen);
    ok(d, &["measure", "--snapshot", "snapshot.json", "--bin-width-db", "2"]);
    let out = ok(d, &["solve", "--statistics", "statistics.json", "--iterations", "500", "--out", "sl.json", "--trace", "trace.csv"]);
    assert!(out.contains("objective"), "{out}");
    ok(d, &["solve", "--statistics", "statistics.json", "--algorithm", "ce", "--out", "ce.json", "--fit", "fit.json"]);
    let out = ok(d, &["baseline", "--statistics", "statistics.json", "--snapshot", "snapshot.json", "--i-nominal-db", "5,10"]);
    assert!(out.contains("selected"), "{out}");
    ok(d, &["evaluate", "--solution", "sl.json", "--snapshot", "snapshot.json"]);
    ok(d, &["evaluate", "--solution", "solution_fa_fpc.json", "--snapshot", "snapshot.json"]);
    ok(d, &["report", "--report", "report_sl.json", "--reference", "report_fa_fpc.json", "--statistics", "statistics.json"]);
    for f in ["trace.csv", "fit.json", "ce.json", "report_sl_ues.csv", "report_fa_fpc_percentiles.csv", "gains.csv", "groups.csv", "cdf_sl.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let gains = fs::read_to_string(d.join("gains.csv")).unwrap();
    assert!(gains.starts_with("percentile,gain\n") && gains.lines().count() == 8);
    let snap = fs::read_to_string(d.join("snapshot.json")).unwrap();
    assert!(snap.contains("\"schema_version\":1"));
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut a = vec!["generate"];
    a.extend(SMALL);
    a.extend(["--out", "a.json"]);
    ok(d, &a);
    let mut b = a.clone();
    *b.last_mut().unwrap() = "b.json";
    ok(d, &b);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
}

const RUN_CONFIG: &str = r#"
seed = 5

[network]
area_km2 = 0.5
macro_count = 4
pico_count = 1
density_per_km2 = 200.0

[solver]
iterations = 300
diagnostics_every = 100
mc_samples_diag = 100
polish_mc_samples = 500
"#;

#[test]
fn run_caches_and_sweep_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.toml"), RUN_CONFIG).unwrap();
    let first = ok(d, &["run", "--config", "run.toml"]);
    assert!(first.contains("median rate") && !first.contains("(cached)"), "{first}");
    let second = ok(d, &["run", "--config", "run.toml"]);
    assert_eq!(second.matches("(cached)").count(), 6, "{second}");
    let runs: Vec<_> = fs::read_dir(d.join("artifacts/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run_dir = runs[0].as_ref().unwrap().path();
    assert!(run_dir.join("manifest.json").exists() && run_dir.join("gains.csv").exists());

    let out = ok(d, &["sweep", "--config", "run.toml", "--bins", "1,2", "--caps", "20", "--jobs", "2"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("1,") || l.starts_with("2,")).count(), 2, "{out}");
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[measurements]\nbin_sise_db = 2.0\n").unwrap();
    let out = leap(d, &["run", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bin_sise_db") && err.contains("line 2"), "{err}");

    fs::write(d.join("run.toml"), RUN_CONFIG).unwrap();
    let out = leap(d, &["sweep", "--config", "run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep grid is empty"));

    let out = leap(d, &["measure", "--snapshot", "missing.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}
