mod common;

use handcue::pipeline::{run_frames, PipelineConfig};
use handcue::protocol::{encode_frame, encode_hello, VERSION};
use handcue::service::{Client, Server};

/// Low threshold and aggressive suppression so untrained weights still
/// yield a handful of hands per frame.
fn busy_config() -> PipelineConfig {
    PipelineConfig {
        conf_thresh: 0.005,
        nms_iou: 0.01,
        refine_passes: 0,
        shift_average: false,
        ..PipelineConfig::default()
    }
}

#[test]
fn stream_replies_equal_batch_output_byte_for_byte() {
    let analyzer = common::untrained_analyzer(busy_config());
    let frames = common::scene_frames(3, 12);
    let (results, events) = run_frames(analyzer.clone(), &frames).unwrap();
    assert!(results.iter().any(|r| !r.hands.is_empty()));

    let server = Server::bind("127.0.0.1:0", analyzer).unwrap();
    let mut client = Client::connect(server.addr).unwrap();
    let welcome = client.hello(VERSION).unwrap();
    assert!(welcome.result.unwrap().contains("supported_versions"));
    let (mut got_results, mut got_events) = (Vec::new(), Vec::new());
    for f in &frames {
        let r = client.send_frame(f).unwrap();
        assert_eq!(r.error, None);
        got_results.push(r.result.unwrap());
        got_events.extend(r.events);
    }
    client.close().unwrap();
    server.stop();

    let want_results: Vec<String> = results.iter().map(|r| r.to_json_line()).collect();
    let want_events: Vec<String> = events.iter().map(|e| e.to_json_line()).collect();
    assert_eq!(got_results, want_results);
    assert_eq!(got_events, want_events);
}

#[test]
fn malformed_frames_get_one_error_and_the_session_continues() {
    let analyzer = common::untrained_analyzer(PipelineConfig::default());
    let frames = common::scene_frames(4, 2);
    let server = Server::bind("127.0.0.1:0", analyzer).unwrap();
    let mut client = Client::connect(server.addr).unwrap();

    let mut truncated = encode_frame(&frames[0]);
    truncated.truncate(truncated.len() / 2);
    let r = client.request(&truncated).unwrap();
    assert!(r.error.unwrap().contains("truncated"));
    assert!(r.result.is_none() && r.events.is_empty());

    let r = client.request(&encode_hello(VERSION + 3)).unwrap();
    let body: serde_json::Value = serde_json::from_str(&r.error.unwrap()).unwrap();
    assert_eq!(body["supported_versions"], serde_json::json!([VERSION]));

    let mut bad_magic = encode_frame(&frames[0]);
    bad_magic[..8].copy_from_slice(b"NOTMAGIC");
    assert!(client.request(&bad_magic).unwrap().error.is_some());

    let r = client.send_frame(&frames[1]).unwrap();
    assert_eq!(r.error, None);
    let result: serde_json::Value = serde_json::from_str(&r.result.unwrap()).unwrap();
    assert_eq!(result["frame_id"], 1);
    client.close().unwrap();
}

#[test]
fn sessions_keep_separate_workflows() {
    let analyzer = common::untrained_analyzer(busy_config());
    let frames = common::scene_frames(5, 3);
    let server = Server::bind("127.0.0.1:0", analyzer).unwrap();
    let mut a = Client::connect(server.addr).unwrap();
    let mut b = Client::connect(server.addr).unwrap();
    for f in &frames {
        a.send_frame(f).unwrap();
    }
    // A fresh session accepts timestamps the other one has already passed.
    let r = b.send_frame(&frames[0]).unwrap();
    assert_eq!(r.error, None);
    let stale = a.send_frame(&frames[0]).unwrap();
    assert!(stale.error.unwrap().contains("backwards"));
    a.close().unwrap();
    b.close().unwrap();
}

#[test]
fn handshake_then_close() {
    let server = Server::bind("127.0.0.1:0", common::untrained_analyzer(PipelineConfig::default())).unwrap();
    let mut c = Client::connect(server.addr).unwrap();
    let r = c.hello(VERSION).unwrap();
    assert_eq!(r.error, None);
    c.close().unwrap();
    server.stop();
}
