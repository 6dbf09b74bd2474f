use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"{
    "grid": {"nx": 160, "ny": 160},
    "manual": {"lambda": [13, 65], "delta": [1.0, 0.25], "mu": [10.0]},
    "mode": "euler2d",
    "energy_profile": {"type": "bump", "center": 0.0, "width": 2.0, "height": 0.5},
    "sampling": {"energy": 6, "residual": 2, "weak_form": 2},
    "seed": 5
}"#;

fn qglab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qglab"))
        .args(args)
        .env("QGLAB_THREADS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_modes_prints_a_passing_certificate() {
    let out = qglab(&["verify-modes"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["families"].as_array().unwrap().len(), 4);
}

#[test]
fn run_stage_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = qglab(&[
            "run-stage",
            "--config",
            &cfg,
            "--output",
            dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stdout)
        );
        let csv = fs::read(dir.join("stage_0.csv")).unwrap();
        let json = fs::read(dir.join("stage_0.json")).unwrap();
        let summary = fs::read(dir.join("summary.json")).unwrap();
        outputs.push((csv, json, summary));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "t,energy,gap,stress_c0,stress_c1,rho"
    );

    let report = qglab(&["report", "--output", tmp.path().join("a").to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("all invariants hold"));
}

#[test]
fn zero_energy_run_has_no_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &CONFIG.replace(
            r#"{"type": "bump", "center": 0.0, "width": 2.0, "height": 0.5}"#,
            r#"{"type": "zero"}"#,
        ),
    );
    let dir = tmp.path().join("out");
    let out = qglab(&["run", "--config", &cfg, "--output", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["stages"][0]["pumped_windows"], 0);
    assert_eq!(s["stages"][0]["stress_c0"], 0.0);
}

#[test]
fn failed_assumption_sets_the_exit_code_and_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    // λ₁ = 130 does not fit a 160² grid.
    let cfg = write_config(tmp.path(), &CONFIG.replace("[13, 65]", "[13, 130]"));
    let dir = tmp.path().join("out");
    let out = qglab(&[
        "run-stage",
        "--config",
        &cfg,
        "--output",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let s = fs::read_to_string(dir.join("summary.json")).unwrap();
    assert!(s.contains("overflows the grid band"), "{s}");
}

#[test]
fn schema_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("euler2d", "qg4d"));
    let out = qglab(&["run-stage", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`mode`"));
}
