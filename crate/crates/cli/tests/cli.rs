use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn spec(name: &str) -> String {
    root().join("specs").join(name).to_string_lossy().into_owned()
}

fn opacert(args: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_opacert"))
        .args(args)
        .status()
        .expect("binary runs");
    status.code().expect("exit code")
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn vehicle_certificate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let vehicle = spec("vehicle.json");
    for dir in [&a, &b] {
        let code = opacert(&["verify-opacity", "--spec", &vehicle, "--out", dir.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    for file in ["report.json", "certificate.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let r = report(&a);
    assert_eq!(r["outcome"], "certified-opaque");
    assert_eq!(r["recheck"]["certified"], true);
    assert!(r.get("timing").is_none());
    let cert: Value = serde_json::from_slice(&fs::read(a.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["polynomial"].as_array().unwrap().len(), 15);
    assert_eq!(cert["kind"], "safety");
}

#[test]
fn small_threshold_fails_the_assumption() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let code = opacert(&["verify-opacity", "--spec", &spec("vehicle.json"), "--delta", "0.9", "--out", out]);
    assert_eq!(code, 2);
    let r = report(tmp.path());
    assert_eq!(r["outcome"], "input-error");
    assert_eq!(r["assumption"]["holds"], false);
    assert!(r.get("attempts").is_none());
}

#[test]
fn zero_certificate_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cert: Value =
        serde_json::from_slice(&fs::read(spec("vehicle_published_certificate.json")).unwrap()).unwrap();
    cert["polynomial"] = Value::from("0");
    let path = tmp.path().join("zero.json");
    fs::write(&path, serde_json::to_vec(&cert).unwrap()).unwrap();
    let out = tmp.path().join("out");
    let code = opacert(&[
        "validate-cert",
        "--spec",
        &spec("vehicle.json"),
        "--cert",
        path.to_str().unwrap(),
        "--samples",
        "2000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    let r = report(&out);
    let unsafe_check = r["validation"]["conditions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "unsafe")
        .unwrap();
    assert!(unsafe_check["violations"].as_u64().unwrap() > 0);
}

#[test]
fn infeasible_program_gives_no_certificate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let code = opacert(&["verify-lack", "--spec", &spec("room.json"), "--fixed-policy", "0;0", "--out", out]);
    assert_eq!(code, 1);
    let r = report(tmp.path());
    assert_eq!(r["outcome"], "inconclusive");
    assert!(r.get("certificate").is_none());
    assert!(!tmp.path().join("certificate.json").exists());
    assert_eq!(r["attempts"][0]["constraints"]["boundary"], 4);
    assert_eq!(r["attempts"][0]["status"], "infeasible");
}

#[test]
fn reach_simulation_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let code = opacert(&[
        "simulate",
        "--spec",
        &spec("room.json"),
        "--mode",
        "reach",
        "--fixed-policy",
        "0;0",
        "--trials",
        "5",
        "--horizon",
        "50",
        "--out",
        out,
    ]);
    assert_eq!(code, 0);
    let r = report(tmp.path());
    assert_eq!(r["outcome"], "completed");
    let csv = r["simulation"]["csv"].as_array().unwrap();
    assert_eq!(csv.len(), 2);
    for name in csv {
        let text = fs::read_to_string(tmp.path().join(name.as_str().unwrap())).unwrap();
        assert!(text.starts_with("traj,t,T1,T2,Th1,Th2,nu1,nu2,nuh1,nuh2,gap\n"), "{text:.80}");
        assert_eq!(text.lines().count(), 1 + 5 * 51);
    }
    assert_eq!(r["simulation"]["reach"].as_array().unwrap().len(), 2);
}

#[test]
fn malformed_spec_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"name": "bad", "state_vars": ["x"]}"#).unwrap();
    let out = tmp.path().join("out");
    let code = opacert(&["check-assumption", "--spec", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(report(&out)["outcome"], "input-error");
}
