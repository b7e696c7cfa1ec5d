//! Untrained models: fast to build, deterministic, and enough to exercise
//! the plumbing around them.

use handcue::detector::{Detector, DetectorConfig};
use handcue::geometry::CameraCalibration;
use handcue::landmark::{LandmarkConfig, LandmarkNet};
use handcue::pipeline::{Analyzer, Frame, Models, PipelineConfig};
use handcue::pose::{PoseConfig, PoseNet};
use handcue::synth::{generate_scene, SceneConfig};
use std::sync::Arc;

pub fn untrained_analyzer(cfg: PipelineConfig) -> Arc<Analyzer> {
    let models = Models::new(
        Detector::new(DetectorConfig::default(), 1).unwrap(),
        LandmarkNet::new(LandmarkConfig::default(), 2).unwrap(),
        PoseNet::new(PoseConfig::default(), 3).unwrap(),
    )
    .unwrap();
    let cfg = PipelineConfig {
        bed: Some(SceneConfig::default().bed),
        ..cfg
    };
    Arc::new(Analyzer::new(cfg, models, CameraCalibration::default()).unwrap())
}

pub fn scene_frames(seed: u64, n: u64) -> Vec<Frame> {
    let calib = CameraCalibration::default();
    (0..n)
        .map(|i| Frame::from_scene(&generate_scene(&SceneConfig::default(), &calib, seed, i).unwrap(), i, i * 100))
        .collect()
}
