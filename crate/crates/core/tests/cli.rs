use std::path::Path;
use std::process::{Command, Output};

fn qcrit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcrit")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(dir: &Path, out: &str, cmd: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(out).join(format!("{cmd}.json"))).unwrap()).unwrap()
}

#[test]
fn eig_report_has_envelope_and_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let o = qcrit(d.path(), &["eig", "--resolution", "201", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(d.path(), "o", "eig");
    assert_eq!(r["schema"], "qcrit-report v1");
    assert_eq!(r["command"], "eig");
    assert_eq!(r["status"], "ok");
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let l = r["result"]["lambda1"].as_f64().unwrap();
    assert!((l - std::f64::consts::PI.powi(2)).abs() < 1e-3);
    assert!(d.path().join("o/eig_eigenfunction.csv").exists());
    assert!(d.path().join("o/eig_trace.csv").exists());
}

#[test]
fn missing_potential_file_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let o = qcrit(d.path(), &["eig", "--potential-file", "absent.csv", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("potential.file") && e.contains("absent.csv"), "{e}");
    assert!(!d.path().join("o/eig.json").exists());
}

#[test]
fn malformed_expression_reports_column() {
    let d = tempfile::tempdir().unwrap();
    let o = qcrit(d.path(), &["dirichlet", "--rhs", "1 + sin(x", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("dirichlet.rhs") && e.contains("column"), "{e}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = qcrit(d.path(), &["eig", "--set", "solver.tolerance=1e-9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tolerance"));
}

#[test]
fn config_file_and_overrides_merge() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("exp.toml"),
        "seed = 5\n[domain]\nresolution = [151]\n[operator]\np = 3.0\n[potential]\nexpr = \"-2\"\n",
    )
    .unwrap();
    let o = qcrit(d.path(), &["eig", "--config", "exp.toml", "--p", "2", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(d.path(), "o", "eig");
    assert_eq!(r["operator"]["p"].as_f64(), Some(2.0));
    assert_eq!(r["seed"].as_u64(), Some(5));
    assert_eq!(r["grid"]["resolution"][0].as_u64(), Some(151));
    let l = r["result"]["lambda1"].as_f64().unwrap();
    assert!((l - (std::f64::consts::PI.powi(2) - 2.0)).abs() < 2e-3);
}

#[test]
fn potential_from_cell_values() {
    let d = tempfile::tempdir().unwrap();
    let cells: String = (0..100).map(|_| "-3\n").collect();
    std::fs::write(d.path().join("v.csv"), cells).unwrap();
    let o = qcrit(d.path(), &["eig", "--resolution", "101", "--potential-file", "v.csv", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let l = report(d.path(), "o", "eig")["result"]["lambda1"].as_f64().unwrap();
    assert!((l - (std::f64::consts::PI.powi(2) - 3.0)).abs() < 1e-2);
}

#[test]
fn output_dir_does_not_change_the_hash() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(qcrit(d.path(), &["verify-operator", "--set", "verify.samples=1000", "--out", out]).status.success());
    }
    assert_eq!(report(d.path(), "a", "verify-operator")["config_hash"], report(d.path(), "b", "verify-operator")["config_hash"]);
    let a = std::fs::read(d.path().join("a/verify-operator.json")).unwrap();
    let b = std::fs::read(d.path().join("b/verify-operator.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn classify_verdicts() {
    let d = tempfile::tempdir().unwrap();
    let cases = [("0", "subcritical"), ("-2*pi^2", "supercritical")];
    for (k, (v, want)) in cases.iter().enumerate() {
        let out = format!("c{k}");
        let o = qcrit(d.path(), &["classify", "--resolution", "201", "--potential", v, "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(report(d.path(), &out, "classify")["result"]["classification"], *want);
    }
}

#[test]
fn every_command_runs_with_defaults() {
    let d = tempfile::tempdir().unwrap();
    for cmd in ["dirichlet", "picone", "aap-check", "capacity", "hardy", "tau", "morrey"] {
        let o = qcrit(d.path(), &[cmd, "--resolution", "101", "--out", "o"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert_eq!(report(d.path(), "o", cmd)["command"], cmd);
    }
}

#[test]
fn aap_check_reports_witness_when_negative() {
    let d = tempfile::tempdir().unwrap();
    let o = qcrit(d.path(), &["aap-check", "--resolution", "201", "--potential", "-12", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &report(d.path(), "o", "aap-check")["result"];
    assert_eq!(r["nonnegative"], false);
    assert!(r["witness_energy"].as_f64().unwrap() < 0.0);
}
