//! Scripted frame sequences with known ground truth.

use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, Point3};
use crate::pipeline::Frame;
use crate::synth::{render_scene, sample_articulation, sample_layout, synthesize_hand, SceneConfig};
use handcue_tensor::{Rng, Stream};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoldenScript {
    pub seed: u64,
    pub frame_interval_ms: u64,
    /// Open hand, then the "okay" gesture, then open again.
    pub frames_before: usize,
    pub frames_okay: usize,
    pub frames_after: usize,
    /// Per-frame wrist tremor (uniform, per axis), meters.
    pub tremor_m: f64,
}

impl Default for GoldenScript {
    fn default() -> Self {
        Self {
            seed: 2024,
            frame_interval_ms: 100,
            frames_before: 10,
            frames_okay: 40,
            frames_after: 10,
            tremor_m: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenSequence {
    pub frames: Vec<Frame>,
    /// "O" center of the untrembling okay hand, scanner frame, meters.
    pub target: Point3,
    pub okay_frames: std::ops::Range<usize>,
}

/// One technician hand at the side of the bed performs the gesture; a
/// patient hand rests on the bed throughout.
pub fn golden_sequence(script: &GoldenScript, scene: &SceneConfig, calib: &CameraCalibration) -> Result<GoldenSequence> {
    let cfg = SceneConfig {
        technicians: (1, 1),
        hands_per_technician: (1, 1),
        patient_hands: (1, 1),
        p_okay: 0.0,
        ..scene.clone()
    };
    let mut rng = Rng::derive(script.seed, Stream::Scene, 0);
    let spec = sample_layout(&cfg, calib, &mut rng)?;
    let tech = spec
        .hands
        .iter()
        .position(|(_, owner)| !spec.bodies[*owner].patient)
        .ok_or_else(|| Error::Invalid("layout has no technician hand".into()))?;
    let (ok_curls, ok_param) = sample_articulation(&mut rng, true);
    let (open_curls, open_param) = sample_articulation(&mut rng, false);
    let mut okay_params = spec.hands[tech].0.clone();
    okay_params.curls = ok_curls;
    okay_params.okay = ok_param;
    let target = calib.camera_to_scanner(synthesize_hand(&okay_params).o_center_camera());

    let n = script.frames_before + script.frames_okay + script.frames_after;
    let okay_frames = script.frames_before..script.frames_before + script.frames_okay;
    let mut tremor = Rng::derive(script.seed, Stream::Noise, 0);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = spec.clone();
        let p = &mut s.hands[tech].0;
        if okay_frames.contains(&i) {
            p.curls = ok_curls;
            p.okay = ok_param;
        } else {
            p.curls = open_curls;
            p.okay = open_param;
        }
        let t = script.tremor_m;
        p.wrist = p.wrist + Point3::new(tremor.uniform(-t, t), tremor.uniform(-t, t), tremor.uniform(-t, t));
        let sample = render_scene(&s, calib, &cfg)?;
        frames.push(Frame::from_scene(&sample, i as u64, i as u64 * script.frame_interval_ms));
    }
    Ok(GoldenSequence {
        frames,
        target,
        okay_frames,
    })
}
