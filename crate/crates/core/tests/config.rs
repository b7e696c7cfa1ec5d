use handcue::config::*;
use handcue::error::Error;
use std::fs;

#[test]
fn overrides_create_nested_keys_and_parse_literals() {
    let mut t = toml::Table::new();
    apply_override(&mut t, "pipeline.confirm.window_ms=2000").unwrap();
    apply_override(&mut t, "pipeline.shift_average=false").unwrap();
    apply_override(&mut t, "train.detector.train.lr = 0.002").unwrap();
    apply_override(&mut t, "pipeline.calibration=cam.toml").unwrap();
    assert_eq!(t["pipeline"]["confirm"]["window_ms"].as_integer(), Some(2000));
    assert_eq!(t["pipeline"]["shift_average"].as_bool(), Some(false));
    assert_eq!(t["train"]["detector"]["train"]["lr"].as_float(), Some(0.002));
    assert_eq!(t["pipeline"]["calibration"].as_str(), Some("cam.toml"));
    assert!(apply_override(&mut t, "no_equals").is_err());
    assert!(apply_override(&mut t, "a..b=1").is_err());
    assert!(apply_override(&mut t, "pipeline.shift_average.x=1").is_err());
}

#[test]
fn defaults_load_and_fill_the_bed() {
    let s = Settings::load(None, &[]).unwrap();
    assert_eq!(s.pipeline.bed, Some(s.scene.bed));
    let s = Settings::load(None, &["pipeline.confirm.min_detections=4".into()]).unwrap();
    assert_eq!(s.pipeline.confirm.min_detections, 4);
}

#[test]
fn unknown_fields_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "[pipeline]\nconf_tresh = 0.3\n").unwrap();
    assert!(matches!(Settings::load(Some(&p), &[]), Err(Error::Config(_))));
    fs::write(&p, "[pipeline]\nnms_iou = 1.5\n").unwrap();
    assert!(matches!(Settings::load(Some(&p), &[]), Err(Error::Config(_))));
    assert!(matches!(Settings::load(Some(&dir.path().join("missing.toml")), &[]), Err(Error::Config(_))));
    assert!(matches!(Settings::load(None, &["pipeline.depth_window=4".into()]), Err(Error::Config(_))));
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "[pipeline]\ncalibration = \"cam.toml\"\n[pipeline.checkpoints]\ndetector = \"d.ckpt\"\n").unwrap();
    let s = Settings::load(Some(&p), &[]).unwrap();
    assert_eq!(s.pipeline.calibration, Some(dir.path().join("cam.toml")));
    assert_eq!(s.pipeline.checkpoints.detector, dir.path().join("d.ckpt"));
    assert_eq!(s.pipeline.checkpoints.landmark, dir.path().join("checkpoints/landmark.ckpt"));
}

#[test]
fn snapshot_reloads_to_the_same_settings() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "[scene]\np_okay = 0.3\n").unwrap();
    let s = Settings::load(Some(&p), &["train.landmark.scenes=10".into()]).unwrap();
    let out = dir.path().join("run");
    s.write_snapshot(&out).unwrap();
    // Paths were made absolute on the first load, so they survive the move.
    let back = Settings::load(Some(&out.join(SNAPSHOT_FILE)), &[]).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.degraded(), handcue::recipe::degraded_condition());
}
