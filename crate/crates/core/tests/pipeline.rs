mod common;

use handcue::error::Error;
use handcue::pipeline::*;
use handcue::workflow::Phase;

#[test]
fn blank_frames_stay_idle_without_events() {
    let analyzer = common::untrained_analyzer(PipelineConfig::default());
    let mut p = Pipeline::new(analyzer).unwrap();
    for i in 0..5u64 {
        let f = Frame {
            frame_id: i,
            timestamp_ms: i * 100,
            width: 448,
            height: 448,
            rgb: vec![0; 3 * 448 * 448],
            depth: None,
        };
        let out = p.process(&f).unwrap();
        assert!(out.events.is_empty());
        assert!(out.result.detections.is_empty());
        assert_eq!(out.result.probability, None);
        assert_eq!(p.phase(), Phase::Idle);
    }
}

#[test]
fn frames_of_the_wrong_size_are_rejected() {
    let analyzer = common::untrained_analyzer(PipelineConfig::default());
    let f = Frame {
        frame_id: 0,
        timestamp_ms: 0,
        width: 64,
        height: 64,
        rgb: vec![0; 3 * 64 * 64],
        depth: None,
    };
    assert!(matches!(analyzer.analyze(&f), Err(Error::Shape(_))));
    let short = Frame { rgb: vec![0; 10], ..f };
    assert!(analyzer.analyze(&short).is_err());
}

#[test]
fn every_nth_frame_is_analyzed() {
    let cfg = PipelineConfig {
        process_every_n_frames: 3,
        ..PipelineConfig::default()
    };
    let analyzer = common::untrained_analyzer(cfg);
    let frames = common::scene_frames(6, 7);
    let (results, _) = run_frames(analyzer, &frames).unwrap();
    let skipped: Vec<bool> = results.iter().map(|r| r.skipped).collect();
    assert_eq!(skipped, [false, true, true, false, true, true, false]);
}

#[test]
fn batch_runs_are_deterministic() {
    let cfg = PipelineConfig {
        conf_thresh: 0.005,
        nms_iou: 0.01,
        ..PipelineConfig::default()
    };
    let analyzer = common::untrained_analyzer(cfg);
    let frames = common::scene_frames(7, 3);
    let a = run_frames(analyzer.clone(), &frames).unwrap();
    let b = run_frames(analyzer, &frames).unwrap();
    assert_eq!(a, b);
    for r in &a.0 {
        for h in &r.hands {
            assert!((0.0..=1.0).contains(&h.probability));
            assert!(h.landmarks.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
        }
    }
}

#[test]
fn invalid_pipeline_configs_are_rejected() {
    let bed = Some(handcue::synth::SceneConfig::default().bed);
    for cfg in [
        PipelineConfig { bed: None, ..PipelineConfig::default() },
        PipelineConfig { bed, conf_thresh: 0.0, ..PipelineConfig::default() },
        PipelineConfig { bed, depth_window: 4, ..PipelineConfig::default() },
        PipelineConfig { bed, process_every_n_frames: 0, ..PipelineConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}
