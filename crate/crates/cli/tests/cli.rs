use handcue::detector::{Detector, DetectorConfig};
use handcue::landmark::{LandmarkConfig, LandmarkNet};
use handcue::pose::{PoseConfig, PoseNet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn handcue(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handcue"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn handcue")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Untrained networks at the default checkpoint paths.
fn write_untrained(dir: &Path) {
    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck).unwrap();
    Detector::new(DetectorConfig::default(), 1).unwrap().to_checkpoint(1).unwrap().save(ck.join("detector.ckpt")).unwrap();
    LandmarkNet::new(LandmarkConfig::default(), 2).unwrap().to_checkpoint(2).unwrap().save(ck.join("landmark.ckpt")).unwrap();
    PoseNet::new(PoseConfig::default(), 3).unwrap().to_checkpoint(3).unwrap().save(ck.join("pose.ckpt")).unwrap();
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = handcue(d, &["--set", "pipeline.conf_thresh=1.5", "serve"]);
    assert_eq!(code(&bad), 2, "{}", String::from_utf8_lossy(&bad.stderr));

    fs::write(d.join("c.toml"), "[pipeline]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&handcue(d, &["--config", "c.toml", "run", "--golden", "--out", "o"])), 2);

    let missing = handcue(d, &["run", "--golden", "--out", "o"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    write_untrained(d);
    let serve = handcue(d, &["serve", "--addr", "127.0.0.1:0"]);
    assert_eq!(code(&serve), 2);
    assert!(String::from_utf8_lossy(&serve.stderr).contains("calibration"));
}

#[test]
fn synth_then_eval_and_run_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_untrained(d);
    let s = handcue(d, &["synth", "--out", "data", "--seed", "3", "--split", "test=6"]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert!(d.join("data/test").is_dir());

    let e = handcue(d, &["eval", "--dataset", "data", "--out", "eval"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["images"], 6);
    assert_eq!(fs::read_to_string(d.join("eval/outcomes.jsonl")).unwrap().lines().count(), 6);

    let r = handcue(d, &["run", "--dataset", "data", "--limit", "4", "--out", "run", "--annotate"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(d.join("run/results.jsonl")).unwrap().lines().count(), 4);
    assert!(d.join("run/events.jsonl").is_file());
    assert_eq!(fs::read_dir(d.join("run/annotated")).unwrap().count(), 4);

    // Asking for frames past the end is a usage problem.
    let empty = handcue(d, &["run", "--dataset", "data", "--start", "6", "--out", "none"]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn golden_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_untrained(d);
    let args = ["run", "--golden", "--limit", "5", "--out"];
    for out in ["a", "b"] {
        let mut v = args.to_vec();
        v.push(out);
        let o = handcue(d, &v);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("golden target"));
    }
    assert_eq!(fs::read(d.join("a/results.jsonl")).unwrap(), fs::read(d.join("b/results.jsonl")).unwrap());
}
