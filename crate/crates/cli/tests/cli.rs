use std::path::Path;
use std::process::Command;

use hierctl::config::TINY_CONFIG;

fn hierctl(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hierctl"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn tiny(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY_CONFIG}{extra}")).unwrap();
    path
}

#[test]
fn oracle_check_on_tiny_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let out = hierctl(
        &["oracle-check", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&dir.path().join("oracle_check.csv"));
    assert!(rows.len() > 10);
    assert!(rows.iter().all(|r| r[3] == "true"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "oracle-check");
    assert_eq!(manifest["config"]["problem"]["nx"], 3);
}

#[test]
fn oracle_check_refuses_large_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = hierctl(&["oracle-check"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[problem]\nnx = 4\n\n[solver]\ncg_tolerance = 1e-9\n").unwrap();
    let out = hierctl(&["nash", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:5"), "{err}");
    assert!(err.contains("cg_tolerance"), "{err}");
}

#[test]
fn invalid_override_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = hierctl(&["nash", "--beta2=-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--beta2"));
}

#[test]
fn zero_data_gives_zero_controls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("[problem]\n", "[problem]\ny0 = \"zero\"\n");
    let text = text.replace(
        "[game]\n",
        "[game]\ntarget1_amplitude = 0.0\ntarget2_amplitude = 0.0\n",
    );
    std::fs::write(&cfg, text).unwrap();
    let out = hierctl(
        &["null-control", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&dir.path().join("null_control.csv"));
    assert_eq!(rows.len(), 3);
    for r in rows {
        // u1_cost, u2_cost, control_norm_sq
        assert_eq!(
            (r[4].as_str(), r[5].as_str(), r[6].as_str()),
            ("0e0", "0e0", "0e0")
        );
        // cost ratio 0/0 is left empty
        assert_eq!(r[10], "");
    }
}

#[test]
fn solver_failure_exits_three_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "\n[solver]\ncg_max_iters = 1\ncg_tol = 1e-14\n");
    let out = hierctl(
        &[
            "null-control",
            "--config",
            cfg.to_str().unwrap(),
            "--eps",
            "1e-6",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let diag: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(diag["detail"]["kind"], "solver_failure");
    assert_eq!(diag["detail"]["iterations"], 1);
}

#[test]
fn nash_report_on_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = hierctl(&["nash", "--threads", "2"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&dir.path().join("nash.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        let gradient: f64 = r[6].parse().unwrap();
        let characterization: f64 = r[3].parse().unwrap();
        assert!(gradient < 1e-6 && characterization < 1e-8, "{r:?}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = hierctl(
            &[
                "carleman-check",
                "--config",
                cfg.to_str().unwrap(),
                "--threads",
                threads,
                "--seed",
                "5",
            ],
            out,
        );
        assert!(o.status.success());
    }
    for name in ["carleman.csv", "carleman_summary.csv"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
}
