//! End-to-end tests of the `gexp` binary: exit codes, error wording,
//! report structure, and the cross-process determinism contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gexp() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gexp"));
    cmd.env("GEXP_LOG", "warn");
    cmd
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn classical_girsanov_config_passes_with_gaps_inside_bands() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let out = gexp()
        .args(["girsanov", "--config"])
        .arg(configs_dir().join("classical-girsanov.json"))
        .arg("--out")
        .arg(&report_path)
        .env("GEXP_LOG", "error")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(
        out.stderr.is_empty(),
        "GEXP_LOG=error run should be silent on success, got: {}",
        stderr_of(&out)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // Envelope: experiment, config hash, seed.
    assert_eq!(report["experiment"], "girsanov");
    assert_eq!(report["seed"], 42);
    let hash = report["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(report["pass"], true);
    // Substance: every functional gap within its band.
    let rows = report["results"]["functionals"].as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        let gap = row["gap"].as_f64().unwrap();
        let band = row["band"].as_f64().unwrap();
        assert!(
            gap <= band,
            "{}: gap {gap} > band {band}",
            row["label"].as_str().unwrap()
        );
    }
    assert_eq!(report["results"]["overall_pass"], true);
}

#[test]
fn same_seed_different_worker_counts_is_bit_identical() {
    let run = |threads: &str, dir: &Path| -> (serde_json::Value, Vec<u8>) {
        let report_path = dir.join("report.json");
        let out = gexp()
            .args(["girsanov", "--config"])
            .arg(configs_dir().join("classical-girsanov.json"))
            .args(["--paths", "1500", "--threads", threads, "--dump-paths"])
            .arg("--out")
            .arg(&report_path)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        let report =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        let csv = std::fs::read(dir.join("report.paths.csv")).unwrap();
        (report, csv)
    };
    let d1 = tempfile::tempdir().unwrap();
    let d4 = tempfile::tempdir().unwrap();
    let (r1, csv1) = run("1", d1.path());
    let (r4, csv4) = run("4", d4.path());

    assert_eq!(csv1, csv4, "per-path CSV must be byte-identical across worker counts");
    assert_eq!(r1["threads"], 1);
    assert_eq!(r4["threads"], 4);
    assert_eq!(r1["config_sha256"], r4["config_sha256"]);
    // Report values within 1e-10 relative (they are in fact identical).
    assert_within_rel(&r1["results"], &r4["results"], 1e-10, "results");
}

fn assert_within_rel(a: &serde_json::Value, b: &serde_json::Value, tol: f64, path: &str) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            assert_eq!(
                ma.keys().collect::<Vec<_>>(),
                mb.keys().collect::<Vec<_>>(),
                "key mismatch at {path}"
            );
            for (k, va) in ma {
                assert_within_rel(va, &mb[k], tol, &format!("{path}.{k}"));
            }
        }
        (Value::Array(xa), Value::Array(xb)) => {
            assert_eq!(xa.len(), xb.len(), "length mismatch at {path}");
            for (i, (va, vb)) in xa.iter().zip(xb).enumerate() {
                assert_within_rel(va, vb, tol, &format!("{path}[{i}]"));
            }
        }
        (Value::Number(na), Value::Number(nb)) => {
            let (x, y) = (na.as_f64().unwrap(), nb.as_f64().unwrap());
            let scale = x.abs().max(y.abs()).max(1e-300);
            assert!(
                (x - y).abs() <= tol * scale,
                "numeric mismatch at {path}: {x} vs {y}"
            );
        }
        _ => assert_eq!(a, b, "mismatch at {path}"),
    }
}

#[test]
fn empty_battery_is_rejected_with_the_contract_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "empty.json",
        r#"{
            "experiment": "expect",
            "theta": {"kind": "interval1d", "sigma_low": 0.5, "sigma_high": 1.0},
            "battery": []
        }"#,
    );
    let out = gexp().args(["expect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("battery must be nonempty"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn malformed_json_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "broken.json",
        "{\n  \"experiment\": \"mc\",\n  \"theta\": {,}\n}\n",
    );
    let out = gexp().args(["mc", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(
        err.contains("line 3") && err.contains("column"),
        "stderr should carry line/column: {err}"
    );
}

#[test]
fn unknown_fields_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    // Top-level typo.
    let cfg = write_config(
        dir.path(),
        "unknown-top.json",
        r#"{
            "experiment": "expect",
            "theta": {"kind": "interval1d", "sigma_low": 0.5, "sigma_high": 1.0},
            "battery": [{"form": "level", "payoff": {"kind": "square"}, "time": 1.0}],
            "paht_count": 100
        }"#,
    );
    let out = gexp().args(["expect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("paht_count"), "stderr: {}", stderr_of(&out));

    // Nested typo inside the theta section.
    let cfg = write_config(
        dir.path(),
        "unknown-nested.json",
        r#"{
            "experiment": "expect",
            "theta": {"kind": "interval1d", "sigma_low": 0.5, "sigma_hgih": 1.0},
            "battery": [{"form": "level", "payoff": {"kind": "square"}, "time": 1.0}]
        }"#,
    );
    let out = gexp().args(["expect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("sigma_hgih"), "stderr: {}", stderr_of(&out));
}

#[test]
fn subcommand_must_match_the_config_experiment() {
    let out = gexp()
        .args(["expect", "--config"])
        .arg(configs_dir().join("classical-girsanov.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(
        err.contains("expect") && err.contains("girsanov"),
        "stderr should name both kinds: {err}"
    );
}

#[test]
fn dump_paths_requires_an_output_path() {
    let out = gexp()
        .args(["girsanov", "--config"])
        .arg(configs_dir().join("classical-girsanov.json"))
        .arg("--dump-paths")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--out"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_config_file_is_a_configuration_error() {
    let out = gexp()
        .args(["mc", "--config", "/nonexistent/nowhere.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("cannot read"), "stderr: {}", stderr_of(&out));
}

#[test]
fn shipped_configs_round_trip_through_the_parser() {
    let dir = configs_dir();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        seen += 1;
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = gexp_core::config::RunConfig::from_json(&text).unwrap();
        let rendered = serde_json::to_string(&parsed).unwrap();
        let reparsed = gexp_core::config::RunConfig::from_json(&rendered).unwrap();
        assert_eq!(
            serde_json::to_value(&parsed).unwrap(),
            serde_json::to_value(&reparsed).unwrap(),
            "round-trip changed {}",
            path.display()
        );
        assert_eq!(parsed.sha256(), reparsed.sha256(), "hash drift for {}", path.display());
    }
    assert!(seen >= 7, "expected the shipped config set, found {seen}");
}

#[test]
fn seed_override_lands_in_the_report_and_changes_values() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: Option<&str>| -> serde_json::Value {
        let report_path = dir.path().join(format!("r{}.json", seed.unwrap_or("cfg")));
        let mut cmd = gexp();
        cmd.args(["capacity", "--config"])
            .arg(configs_dir().join("capacity-running-max.json"))
            .args(["--paths", "800"])
            .arg("--out")
            .arg(&report_path);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap()
    };
    let base = run(None);
    let reseeded = run(Some("5151"));
    assert_eq!(base["seed"], 17);
    assert_eq!(reseeded["seed"], 5151);
    assert_ne!(
        base["config_sha256"], reseeded["config_sha256"],
        "the hash covers the effective config, seed included"
    );
    assert_ne!(
        base["results"]["capacity"]["estimate"]["value"],
        reseeded["results"]["capacity"]["estimate"]["value"]
    );
    // Rerunning with the same inputs reproduces the report exactly.
    let again = run(Some("5151"));
    assert_eq!(again["results"], reseeded["results"]);
}

#[test]
fn gheat_run_emits_grid_csv_per_functional() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("gheat.json");
    let out = gexp()
        .args(["gheat", "--config"])
        .arg(configs_dir().join("gheat-interval.json"))
        .arg("--out")
        .arg(&report_path)
        .arg("--dump-paths")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let rows = report["results"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        let csv = dir.path().join(format!("gheat.slice{i}.csv"));
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,u"));
        let n = row["n_nodes"].as_u64().unwrap() as usize;
        assert_eq!(lines.count(), n);
    }
}

#[test]
fn novikov_config_verdict_drives_the_exit_code() {
    // The shipped config satisfies the criterion at desk scale.
    let out = gexp()
        .args(["novikov", "--config"])
        .arg(configs_dir().join("novikov-interval.json"))
        .args(["--paths", "2000"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["results"]["verdict"], "satisfied_at_desk_scale");

    // An aggressive integrand fails the same check and exits 1.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "hot.json",
        r#"{
            "experiment": "novikov",
            "theta": {"kind": "interval1d", "sigma_low": 0.5, "sigma_high": 1.0,
                      "nondegeneracy_floor": 0.25},
            "grid": {"horizon": 1.0, "n_steps": 8},
            "paths": 2000,
            "seed": 3,
            "family": {"kind": "constants"},
            "integrand": {"kind": "constant", "h": [2.0]},
            "epsilon": 3.0
        }"#,
    );
    let out = gexp().args(["novikov", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["results"]["verdict"], "diverging");
    assert_eq!(report["pass"], false);
}
