use std::path::PathBuf;
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(format!("{name}.json"))
}

fn fixture(name: &str) -> PathBuf {
    root().join("crates/core/tests/fixtures").join(format!("{name}.json"))
}

fn dalab(args: &[&str], cfg: &PathBuf, out: &tempfile::TempDir) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dalab"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out.path())
        .env("DALAB_WORKERS", "2")
        .output()
        .expect("run dalab")
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["zero_pilot", "two_state", "five_state"] {
        let out = tempfile::tempdir().unwrap();
        let o = dalab(&["validate"], &config(name), &out);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("[PASS]"));
    }
}

#[test]
fn validate_names_the_violated_hypothesis() {
    for (file, tag) in [
        ("broken_vdv", "vdv"),
        ("broken_hypm", "HypM"),
        ("broken_ballr", "BallR"),
        ("broken_rsmall", "Rsmall"),
        ("broken_mcentred", "mcentred"),
        ("broken_mixcoupled", "mixCoupled"),
    ] {
        let out = tempfile::tempdir().unwrap();
        let o = dalab(&["validate"], &fixture(file), &out);
        assert_eq!(o.status.code(), Some(2), "{file}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("inadmissible ({tag})")), "{file}: {err}");
    }
}

#[test]
fn coeffs_of_zero_pilot_have_no_noise() {
    let out = tempfile::tempdir().unwrap();
    let o = dalab(&["coeffs"], &config("zero_pilot"), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("noise rank") && l.trim_end().ends_with(" 0")), "{text}");
    assert!(out.path().join("coefficients.json").exists());
    assert!(out.path().join("manifest_coeffs.json").exists());
}

#[test]
fn parse_errors_report_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("two_state")).unwrap();
    let broken = text.replacen("\"t_end\": ", "\"t_end\": \"soon\", \"x\": ", 1);
    assert_ne!(broken, text);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, broken).unwrap();
    let o = dalab(&["validate"], &path, &dir);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("t_end") && err.contains("line"), "{err}");
}

#[test]
fn verify_then_report() {
    let out = tempfile::tempdir().unwrap();
    let o = dalab(&["verify", "--paths", "200"], &config("two_state"), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r = Command::new(env!("CARGO_BIN_EXE_dalab"))
        .args(["report", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("verification report"));
}
