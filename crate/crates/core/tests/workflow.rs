mod oracles;

use handcue::geometry::{pixel_depth_to_scanner, CameraCalibration, Point2, Point3};
use handcue::workflow::*;
use handcue_tensor::{Rng, Stream};
use oracles::workflow::{context, liveness, trace_equivalence};

#[test]
fn twin_oracle_trace_equivalence_and_safety() {
    let commands = trace_equivalence(8, 100_000).unwrap();
    assert!(commands > 1000, "sequences should reach confirmation often ({commands})");
}

#[test]
fn liveness_sustained_gesture_always_confirms() {
    liveness(9, 20_000).unwrap();
}

#[test]
fn empty_frames_keep_the_machine_idle() {
    let mut wf = Workflow::new(context(&mut Rng::new(1, Stream::Custom(0)))).unwrap();
    for i in 0..100 {
        let recs = wf.observe(&FrameObservation { frame_id: i, timestamp_ms: i * 100, detections: vec![] }).unwrap();
        assert!(recs.is_empty());
        assert_eq!(wf.phase(), Phase::Idle);
    }
}

#[test]
fn timestamps_going_backwards_are_rejected_without_state_change() {
    let mut wf = Workflow::new(context(&mut Rng::new(2, Stream::Custom(0)))).unwrap();
    let ok = OkDetection { probability: 0.9, center: Point2::new(200.0, 200.0), depth: 1500.0 };
    wf.observe(&FrameObservation { frame_id: 0, timestamp_ms: 500, detections: vec![ok] }).unwrap();
    let snapshot = wf.state.clone();
    let err = wf.observe(&FrameObservation { frame_id: 1, timestamp_ms: 400, detections: vec![ok] });
    assert!(err.is_err());
    assert_eq!(wf.state, snapshot);
}

#[test]
fn confirmation_window_and_displacement() {
    let ctx = WorkflowContext {
        cfg: ConfirmConfig::default(),
        calib: CameraCalibration::default(),
        iso_center: Point3::new(0.1, 0.0, -0.2),
    };
    let mut wf = Workflow::new(ctx.clone()).unwrap();
    let ok = OkDetection { probability: 0.8, center: Point2::new(250.0, 230.0), depth: 1600.0 };
    let mut cmd = None;
    for i in 0..40u64 {
        for r in wf.observe(&FrameObservation { frame_id: i, timestamp_ms: i * 100, detections: vec![ok] }).unwrap() {
            if let Event::Command { command } = r.event {
                cmd = Some((i, command));
            }
        }
    }
    let (frame, c) = cmd.expect("confirmed");
    // 3000 ms after the first detection at t = 0.
    assert_eq!(frame, 30);
    let want = pixel_depth_to_scanner(250.0, 230.0, 1600.0, &ctx.calib).unwrap();
    assert!((c.target - want).norm() < 1e-12);
    assert!((c.displacement - (ctx.iso_center - want)).norm() < 1e-12);
}
