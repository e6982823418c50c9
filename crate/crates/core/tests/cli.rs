use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use doa_sim::cli::{
    run_from_args, DELAY_HEADER, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, SUMMARY_HEADER,
};
use doa_sim::scenario::CSV_HEADER;

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .display()
        .to_string()
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![
        "doa-sim".to_string(),
        cmd.to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    run_from_args(args)
}

fn read_table(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    let rows = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            header
                .iter()
                .cloned()
                .zip(r.iter().map(String::from))
                .collect()
        })
        .collect();
    (header, rows)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap()
}

fn assert_manifest_lists_outputs(dir: &Path) {
    let m = manifest(dir);
    let listed: Vec<&str> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let mut present: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    present.sort();
    let mut listed_sorted: Vec<String> = listed.iter().map(|s| s.to_string()).collect();
    listed_sorted.sort();
    assert_eq!(present, listed_sorted);
}

#[test]
fn simulate_nominal_settles_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/run");
    let code = run(
        "simulate",
        &out,
        &[
            "--config",
            &config("nominal.toml"),
            "--controller",
            "state-space-ekf",
        ],
    );
    assert_eq!(code, EXIT_OK);
    let (header, rows) = read_table(&out.join("trace.csv"));
    assert_eq!(header, CSV_HEADER);
    let last: f64 = rows.last().unwrap()["bis_true"].parse().unwrap();
    assert!((last - 50.0).abs() <= 2.0);
    let metrics: toml::Table = std::fs::read_to_string(out.join("metrics.txt"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(metrics["in_bound"].as_bool(), Some(true));
    assert_manifest_lists_outputs(&out);
    let m = manifest(&out);
    assert_eq!(m["seed"].as_integer(), Some(0));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_plant_delay_override() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(
        "simulate",
        tmp.path(),
        &["--config", &config("nominal.toml"), "--set", "patient.td=0"],
    );
    assert_eq!(code, EXIT_OK);
    let m = manifest(tmp.path());
    assert_eq!(m["resolved"]["patient"]["td"].as_float(), Some(0.0));
    assert_eq!(m["resolved"]["nominal"]["td"].as_float(), Some(12.9));
    let (_, rows) = read_table(&tmp.path().join("trace.csv"));
    // With no plant delay the monitor shows the current effect immediately.
    let r = &rows[500];
    assert_eq!(r["bis_true"], r["bis_meas"]);
}

#[test]
fn invalid_gamma_exits_with_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_doa-sim"))
        .args(["simulate", "--set", "patient.gamma=0", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("patient.gamma"), "{stderr}");
    assert!(!tmp.path().join("trace.csv").exists());
}

#[test]
fn unknown_field_and_bad_flags_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run("simulate", tmp.path(), &["--set", "mpc.horizon=3"]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run("simulate", tmp.path(), &["--controller", "pid"]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run("simulate", tmp.path(), &["--set", "nonsense"]),
        EXIT_VALIDATION
    );
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.toml");
    assert_eq!(
        run(
            "simulate",
            tmp.path(),
            &["--config", missing.to_str().unwrap()]
        ),
        EXIT_RUNTIME
    );
}

#[test]
fn noisy_runs_are_byte_identical_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let d = tmp.path().join("d");
    let args = ["--config", &config("noisy.toml"), "--seed", "42"];
    assert_eq!(run("simulate", &a, &args), EXIT_OK);
    assert_eq!(run("simulate", &b, &args), EXIT_OK);
    let ta = std::fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(manifest(&a)["seed"].as_integer(), Some(42));

    let other = ["--config", &config("noisy.toml"), "--seed", "43"];
    assert_eq!(run("simulate", &c, &other), EXIT_OK);
    assert_ne!(ta, std::fs::read(c.join("trace.csv")).unwrap());

    let m = a.join("manifest.toml");
    assert_eq!(
        run("simulate", &d, &["--config", m.to_str().unwrap()]),
        EXIT_OK
    );
    assert_eq!(ta, std::fs::read(d.join("trace.csv")).unwrap());
    let r = a.join("resolved.toml");
    assert_eq!(
        run("simulate", &d, &["--config", r.to_str().unwrap()]),
        EXIT_OK
    );
    assert_eq!(ta, std::fs::read(d.join("trace.csv")).unwrap());
}

#[test]
fn compare_patients_default_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(
        run(
            "compare-patients",
            &a,
            &["--config", &config("nominal.toml")]
        ),
        EXIT_OK
    );
    assert_eq!(
        run(
            "compare-patients",
            &b,
            &["--config", &config("nominal.toml")]
        ),
        EXIT_OK
    );
    let traces: Vec<_> = csv_files(&a)
        .into_iter()
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("trace_")
        })
        .collect();
    assert_eq!(traces.len(), 6);
    for f in csv_files(&a) {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(&f).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name:?}"
        );
    }
    let (header, rows) = read_table(&a.join("summary.csv"));
    assert_eq!(header, SUMMARY_HEADER);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["in_bound"] == "true"));
    assert!(rows
        .iter()
        .all(|r| r["total_drug_ugkg"].parse::<f64>().unwrap() > 0.0));
    let (_, economy) = read_table(&a.join("drug_economy.csv"));
    assert_eq!(economy.len(), 3);
    assert_manifest_lists_outputs(&a);
}

#[test]
fn compare_patients_single_patient() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run(
            "compare-patients",
            tmp.path(),
            &["--config", &config("patient2.toml")]
        ),
        EXIT_OK
    );
    let (_, rows) = read_table(&tmp.path().join("summary.csv"));
    assert_eq!(rows.len(), 2);
    assert!(tmp.path().join("trace_patient2_baseline.csv").exists());
    assert!(tmp
        .path()
        .join("trace_patient2_state-space-ekf.csv")
        .exists());
}

fn sweep(out: &Path, extra: &[&str]) -> BTreeMap<String, f64> {
    assert_eq!(run("delay-sweep", out, extra), EXIT_OK);
    let (header, rows) = read_table(&out.join("tolerable_delay.csv"));
    assert_eq!(header, DELAY_HEADER);
    rows.iter()
        .map(|r| (r["controller"].clone(), r["increase_s"].parse().unwrap()))
        .collect()
}

#[test]
fn delay_sweep_ordering_refinement_and_band_monotonicity() {
    let tmp = tempfile::tempdir().unwrap();
    let base = sweep(&tmp.path().join("base"), &[]);
    assert!(base["state-space-ekf"] > base["baseline"], "{base:?}");
    assert_manifest_lists_outputs(&tmp.path().join("base"));
    assert!(tmp.path().join("base/boundary_in_baseline.csv").exists());
    assert!(tmp.path().join("base/boundary_out_baseline.csv").exists());

    let fine = sweep(
        &tmp.path().join("fine"),
        &["--set", "scenario.resolution=0.5"],
    );
    for (k, v) in &base {
        assert!((fine[k] - v).abs() <= 1.0, "{k}: {v} vs {}", fine[k]);
    }

    let wide = sweep(&tmp.path().join("wide"), &["--set", "scenario.band=20"]);
    for (k, v) in &base {
        assert!(wide[k] >= *v, "{k}: {v} vs {}", wide[k]);
    }
}
