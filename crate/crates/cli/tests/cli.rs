use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn risac(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_risac"))
        .args(args)
        .args(["--preset", "desk", "--set", "frame_len=32", "--jobs", "1", "--out"])
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = risac(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn schedule_frame_decode_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report = ok(d, &["optimize-phases"]);
    assert!(report.contains("UE gain"));
    assert_eq!(header(&d.join("schedule.csv")), "t,n,theta_rad");
    assert_eq!(header(&d.join("loss_trace.csv")), "iter,loss,ortho_metric");
    // 33 rows × 32 elements plus the header
    assert_eq!(fs::read_to_string(d.join("schedule.csv")).unwrap().lines().count(), 33 * 32 + 1);

    let sched = d.join("schedule.csv");
    let s = sched.to_str().unwrap();
    ok(d, &["beam-pattern", "--schedule", s, "--rows", "2,10"]);
    assert_eq!(header(&d.join("beam_pattern.csv")), "t,theta_deg,gain_db");
    assert!(d.join("beam_pattern.svg").exists());

    ok(d, &["synthesize", "--schedule", s, "--set", "noise_var=0.01"]);
    assert_eq!(header(&d.join("frame.csv")), "t,re,im");
    let frame = d.join("frame.csv");
    ok(d, &["decode", "--frame", frame.to_str().unwrap(), "--schedule", s, "--set", "noise_var=0.01"]);
    assert_eq!(header(&d.join("decisions.csv")), "t,symbol_index,prob1,prob2,prob3,prob4");
    assert_eq!(header(&d.join("sigma.csv")), "m,re,im");
    assert_eq!(header(&d.join("recovered_scene.csv")), "m,re,im,gamma");

    let truth: Vec<String> = fs::read_to_string(d.join("symbols.csv")).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    let got: Vec<String> = fs::read_to_string(d.join("decisions.csv")).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(truth, got);
}

#[test]
fn simulate_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = ok(d, &["simulate", "--scenario", "2", "--trials", "2"]);
    assert!(table.contains("proposed"));
    assert_eq!(header(&d.join("ser_curve.csv")), "cnr_db,inr_db,method,ser,stderr,trials");
    assert_eq!(header(&d.join("nmse_curve.csv")), "cnr_db,inr_db,method,nmse_db,trials");
    // five INR points, four detecting methods
    assert_eq!(fs::read_to_string(d.join("ser_curve.csv")).unwrap().lines().count(), 1 + 5 * 4);
    assert!(d.join("ser_curve.svg").exists() && d.join("nmse_curve.svg").exists());
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!risac(d, &["simulate", "--scenario", "4"]).status.success());
    assert!(!risac(d, &["optimize-phases", "--set", "rho=2"]).status.success());
    assert!(!risac(d, &["optimize-phases", "--nbit", "0"]).status.success());
    let missing = d.join("nope.csv");
    let o = risac(d, &["decode", "--frame", missing.to_str().unwrap(), "--schedule", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
}
