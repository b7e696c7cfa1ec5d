//! Per-frame analysis (detection, patient filter, aligned crops, landmarks,
//! pose and gesture) feeding the confirmation state machine.

use crate::detect::{associate, decode, filter_patient, nms, Class, DetectedObject};
use crate::detector::{detector_input, Detector};
use crate::dataset::SceneLabels;
use crate::error::{Error, Result};
use crate::eval::{summarize, EvalReport, ImageOutcome};
use crate::geometry::{hand_orientation, iou, Angle, BBox, CameraCalibration, CropTransform, Point2, Point3};
use crate::hand::{HandLandmarks2D, NUM_JOINTS};
use crate::image::Image;
use crate::landmark::{decode_heatmap, quantize, LandmarkNet};
use crate::pose::PoseNet;
use crate::synth::SceneSample;
use crate::workflow::{ConfirmConfig, EventRecord, FrameObservation, OkDetection, Phase, Workflow, WorkflowContext};
use handcue_tensor::Checkpoint;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Margin the synthetic labels put around the landmark extent; refined
/// crop boxes use the same rule.
pub const HAND_BOX_MARGIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub detector: PathBuf,
    pub landmark: PathBuf,
    pub pose: PathBuf,
    /// Optional separately trained gesture head.
    pub gesture: Option<PathBuf>,
}

impl Default for CheckpointPaths {
    fn default() -> Self {
        Self {
            detector: "checkpoints/detector.ckpt".into(),
            landmark: "checkpoints/landmark.ckpt".into(),
            pose: "checkpoints/pose.ckpt".into(),
            gesture: None,
        }
    }
}

impl CheckpointPaths {
    /// Resolve relative paths against `base`.
    pub fn rebased(&self, base: &Path) -> Self {
        let fix = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            detector: fix(&self.detector),
            landmark: fix(&self.landmark),
            pose: fix(&self.pose),
            gesture: self.gesture.as_ref().map(fix),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub checkpoints: CheckpointPaths,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub patient_iob: f64,
    /// Association gate as a fraction of the body box diagonal.
    pub max_residual_ratio: f64,
    /// Patient bed in image pixels. Required.
    pub bed: Option<BBox>,
    /// Calibration file; the built-in ceiling camera when absent.
    pub calibration: Option<PathBuf>,
    /// Scanner frame, meters.
    pub iso_center: Point3,
    pub confirm: ConfirmConfig,
    /// Landmark passes that re-crop with the orientation and extent found
    /// by the previous pass before the final one.
    pub refine_passes: usize,
    /// Average landmarks over four half-cell shifted crops as well.
    pub shift_average: bool,
    /// Side of the depth window around the "O" center, pixels (odd).
    pub depth_window: usize,
    /// Window readings further than this from the hand's depth are ignored.
    pub depth_band_m: f64,
    pub process_every_n_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            checkpoints: CheckpointPaths::default(),
            conf_thresh: 0.25,
            nms_iou: 0.45,
            patient_iob: 0.65,
            max_residual_ratio: 0.5,
            bed: None,
            calibration: None,
            iso_center: Point3::new(0.0, 0.0, 0.0),
            confirm: ConfirmConfig::default(),
            refine_passes: 2,
            shift_average: true,
            depth_window: 5,
            depth_band_m: 0.04,
            process_every_n_frames: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf_thresh", self.conf_thresh),
            ("nms_iou", self.nms_iou),
            ("patient_iob", self.patient_iob),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        if self.bed.is_none() {
            return Err(Error::Config("bed box is required to tell patients from technicians".into()));
        }
        if !(self.max_residual_ratio > 0.0) {
            return Err(Error::Config("max_residual_ratio must be positive".into()));
        }
        if self.depth_window == 0 || self.depth_window % 2 == 0 {
            return Err(Error::Config(format!("depth_window {} must be odd", self.depth_window)));
        }
        if !(self.depth_band_m > 0.0) {
            return Err(Error::Config("depth_band_m must be positive".into()));
        }
        if self.process_every_n_frames == 0 {
            return Err(Error::Config("process_every_n_frames must be at least 1".into()));
        }
        if !self.iso_center.is_finite() {
            return Err(Error::Config("iso_center must be finite".into()));
        }
        self.confirm.validate()
    }

    pub fn calibration(&self) -> Result<CameraCalibration> {
        match &self.calibration {
            Some(p) => CameraCalibration::load(p),
            None => Ok(CameraCalibration::default()),
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

#[derive(Clone, Debug)]
pub struct Models {
    pub detector: Detector,
    pub landmark: LandmarkNet,
    pub pose: PoseNet,
}

impl Models {
    pub fn new(detector: Detector, landmark: LandmarkNet, pose: PoseNet) -> Result<Self> {
        let m = Self {
            detector,
            landmark,
            pose,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(paths: &CheckpointPaths) -> Result<Self> {
        let detector = Detector::from_checkpoint(&load_checkpoint(&paths.detector)?)?;
        let landmark = LandmarkNet::from_checkpoint(&load_checkpoint(&paths.landmark)?)?;
        let mut pose = PoseNet::from_checkpoint(&load_checkpoint(&paths.pose)?)?;
        if let Some(g) = &paths.gesture {
            pose.load_gesture(&load_checkpoint(g)?)?;
        }
        Self::new(detector, landmark, pose)
    }

    fn validate(&self) -> Result<()> {
        let (lc, pc) = (&self.landmark.cfg, &self.pose.cfg);
        if lc.crop.size != pc.crop_size || lc.heatmap_size() != pc.heatmap_size {
            return Err(Error::Config(format!(
                "landmark crop {}/{} does not match pose input {}/{}",
                lc.crop.size,
                lc.heatmap_size(),
                pc.crop_size,
                pc.heatmap_size
            )));
        }
        Ok(())
    }
}

/// One camera frame: interleaved RGB plus optional depth in sensor units
/// (0 = no reading).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub depth: Option<Vec<u16>>,
}

impl Frame {
    pub fn from_scene(scene: &SceneSample, frame_id: u64, timestamp_ms: u64) -> Self {
        let d = &scene.depth;
        Self {
            frame_id,
            timestamp_ms,
            width: scene.image.width,
            height: scene.image.height,
            rgb: scene.image.to_rgb8(),
            depth: Some(d.data.iter().map(|&v| v.round().clamp(0.0, u16::MAX as f32) as u16).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.rgb.len() != 3 * n {
            return Err(Error::Shape(format!(
                "{} rgb bytes for a {}x{} frame",
                self.rgb.len(),
                self.width,
                self.height
            )));
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return Err(Error::Shape(format!("{} depth values for {n} pixels", d.len())));
            }
        }
        Ok(())
    }

    pub fn image(&self) -> Result<Image> {
        Image::from_rgb8(self.width, self.height, &self.rgb)
    }

    /// Reading under pixel `p`, if any.
    pub fn depth_at(&self, p: Point2) -> Option<f64> {
        let d = self.depth.as_ref()?;
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (x, y) = (p.x as usize, p.y as usize);
        if x >= self.width || y >= self.height {
            return None;
        }
        let v = d[y * self.width + x];
        (v > 0).then_some(v as f64)
    }

    /// Depth of the hand at `center`: the median of the readings in a
    /// `window` square that lie within `band` of the hand's own depth (the
    /// median under its landmarks), so neither a nearer torso nor the bed
    /// behind leaks in. Falls back to the hand depth.
    pub fn hand_depth(&self, landmarks: &HandLandmarks2D, center: Point2, window: usize, band: f64) -> Option<f64> {
        let under: Vec<f64> = landmarks.points.iter().filter_map(|&p| self.depth_at(p)).collect();
        let hand = crate::eval::median(&under)?;
        if !(center.x.is_finite() && center.y.is_finite()) {
            return Some(hand);
        }
        let r = (window / 2) as i64;
        let (cx, cy) = (center.x.floor() as i64, center.y.floor() as i64);
        let mut near = Vec::with_capacity(window * window);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if let Some(v) = self.depth_at(Point2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    if (v - hand).abs() <= band {
                        near.push(v);
                    }
                }
            }
        }
        Some(crate::eval::median(&near).unwrap_or(hand))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Technician,
    Patient,
    /// No body within the association gate; never drives the workflow.
    Unassigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandResult {
    /// Index into the frame's detections.
    pub detection: usize,
    pub body: Option<usize>,
    pub role: Role,
    pub angle_rad: f64,
    /// Image pixels.
    pub landmarks: HandLandmarks2D,
    pub o_center: Point2,
    /// Sensor units.
    pub depth: Option<f64>,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub id: usize,
    pub class: Class,
    pub score: f64,
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
    pub angle_rad: Option<f64>,
    pub dx: Option<f64>,
    pub dy: Option<f64>,
    /// Hands: detection id of the associated body.
    pub body: Option<usize>,
    /// Bodies: on the bed.
    pub patient: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub detections: Vec<DetectedObject>,
    /// Detection ids of bodies classified as patients.
    pub patients: Vec<usize>,
    pub hands: Vec<HandResult>,
}

impl Analysis {
    pub fn records(&self, frame_id: u64) -> Vec<DetectionRecord> {
        self.detections
            .iter()
            .enumerate()
            .map(|(id, d)| DetectionRecord {
                frame_id,
                id,
                class: d.cls,
                score: d.score,
                l: d.bbox.l,
                t: d.bbox.t,
                r: d.bbox.r,
                b: d.bbox.b,
                angle_rad: d.angle.map(Angle::rad),
                dx: d.assoc.map(|a| a.x),
                dy: d.assoc.map(|a| a.y),
                body: self.hands.iter().find(|h| h.detection == id).and_then(|h| h.body),
                patient: (d.cls == Class::Body).then(|| self.patients.contains(&id)),
            })
            .collect()
    }

    pub fn technician_hands(&self) -> impl Iterator<Item = &HandResult> {
        self.hands.iter().filter(|h| h.role == Role::Technician)
    }

    pub fn observation(&self, frame_id: u64, timestamp_ms: u64) -> FrameObservation {
        FrameObservation {
            frame_id,
            timestamp_ms,
            detections: self
                .technician_hands()
                .map(|h| OkDetection {
                    probability: h.probability,
                    center: h.o_center,
                    depth: h.depth.unwrap_or(0.0),
                })
                .collect(),
        }
    }
}

/// Read-only models plus the static scene setup; shareable across
/// sessions.
#[derive(Debug)]
pub struct Analyzer {
    pub cfg: PipelineConfig,
    pub models: Models,
    pub calib: CameraCalibration,
    bed: BBox,
}

const SHIFTS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];

impl Analyzer {
    pub fn new(cfg: PipelineConfig, models: Models, calib: CameraCalibration) -> Result<Self> {
        cfg.validate()?;
        calib.validate()?;
        let bed = cfg.bed.expect("validated");
        Ok(Self {
            cfg,
            models,
            calib,
            bed,
        })
    }

    /// Loads checkpoints and calibration named in `cfg`.
    pub fn from_config(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::load(&cfg.checkpoints)?;
        let calib = cfg.calibration()?;
        Self::new(cfg, models, calib)
    }

    pub fn analyze(&self, frame: &Frame) -> Result<Analysis> {
        frame.validate()?;
        let det = &self.models.detector;
        if frame.width != det.cfg.scene_size || frame.height != det.cfg.scene_size {
            return Err(Error::Shape(format!(
                "frame is {}x{}, detector expects {}x{}",
                frame.width, frame.height, det.cfg.scene_size, det.cfg.scene_size
            )));
        }
        let img = frame.image()?;
        let raw = det.raw_grids(&[&detector_input(&img, &det.cfg)?])?.remove(0);
        let detections = nms(&decode(&raw, self.cfg.conf_thresh)?, self.cfg.nms_iou);
        let hand_ids: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].cls == Class::Hand).collect();
        let body_ids: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].cls == Class::Body).collect();
        let hands: Vec<DetectedObject> = hand_ids.iter().map(|&i| detections[i].clone()).collect();
        let bodies: Vec<DetectedObject> = body_ids.iter().map(|&i| detections[i].clone()).collect();
        let boxes: Vec<BBox> = bodies.iter().map(|b| b.bbox).collect();
        let part = filter_patient(&boxes, &self.bed, self.cfg.patient_iob);
        let patients: Vec<usize> = part.patients.iter().map(|&b| body_ids[b]).collect();
        let links = associate(&hands, &bodies, self.cfg.max_residual_ratio);
        let mut results = Vec::with_capacity(hands.len());
        for (k, link) in links.iter().enumerate() {
            let body = link.body_index.map(|b| body_ids[b]);
            let role = match body {
                Some(b) if patients.contains(&b) => Role::Patient,
                Some(_) => Role::Technician,
                None => Role::Unassigned,
            };
            results.push(self.analyze_hand(&img, frame, hand_ids[k], &hands[k], body, role)?);
        }
        Ok(Analysis {
            detections,
            patients,
            hands: results,
        })
    }

    fn analyze_hand(
        &self,
        img: &Image,
        frame: &Frame,
        detection: usize,
        hand: &DetectedObject,
        body: Option<usize>,
        role: Role,
    ) -> Result<HandResult> {
        let lmk = &self.models.landmark;
        let crop = &lmk.cfg.crop;
        let size = crop.size;
        let mut bbox = hand.bbox;
        let mut angle = hand.angle.unwrap_or_default();
        for _ in 0..self.cfg.refine_passes {
            let tf = CropTransform::for_box(&bbox, angle, size, crop.margin);
            let (_, first) = lmk.predict(&quantize(&crate::geometry::warp(img, &tf)))?;
            let pts = first.map(|p| tf.to_source(p));
            if let Ok(a) = hand_orientation(&pts) {
                angle = a;
            }
            // Keep the detector box when the first pass looks implausible.
            if let Ok(b) = BBox::enclosing(&pts.points, HAND_BOX_MARGIN) {
                let (old, new) = (bbox.width().max(bbox.height()), b.width().max(b.height()));
                if new > 0.6 * old && new < 1.5 * old {
                    bbox = b;
                }
            }
        }
        let base = CropTransform::for_box(&bbox, angle, size, crop.margin);
        let mut tfs = vec![base];
        if self.cfg.shift_average {
            let h = size as f64 / 2.0;
            for (dx, dy) in SHIFTS {
                let mut t = base;
                t.center = base.to_source(Point2::new(h + dx, h + dy));
                tfs.push(t);
            }
        }
        let crops: Vec<Vec<u8>> = tfs.iter().map(|t| quantize(&crate::geometry::warp(img, t))).collect();
        let refs: Vec<&[u8]> = crops.iter().map(Vec::as_slice).collect();
        let hms = lmk.heatmaps(&refs)?;
        let mut sum = [Point2::default(); NUM_JOINTS];
        let mut conf = [0.0; NUM_JOINTS];
        for (hm, t) in hms.iter().zip(&tfs) {
            let l = decode_heatmap(hm).map(|p| t.to_source(p));
            for j in 0..NUM_JOINTS {
                sum[j] = sum[j] + l.points[j];
                conf[j] += l.confidence[j];
            }
        }
        let n = tfs.len() as f64;
        let landmarks = HandLandmarks2D {
            points: sum.map(|p| p * (1.0 / n)),
            confidence: conf.map(|c| c / n),
        };
        let out = self.models.pose.infer_one(&crops[0], &hms[0])?;
        let o_center = landmarks.o_center();
        let band = self.cfg.depth_band_m / self.calib.depth_scale;
        Ok(HandResult {
            detection,
            body,
            role,
            angle_rad: angle.rad(),
            depth: frame.hand_depth(&landmarks, o_center, self.cfg.depth_window, band),
            landmarks,
            o_center,
            probability: out.gesture_probability(),
        })
    }

    pub fn workflow_context(&self) -> WorkflowContext {
        WorkflowContext {
            cfg: self.cfg.confirm.clone(),
            calib: self.calib.clone(),
            iso_center: self.cfg.iso_center,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    /// Left out by `process_every_n_frames`.
    pub skipped: bool,
    pub detections: Vec<DetectionRecord>,
    pub hands: Vec<HandResult>,
    /// Highest technician gesture probability.
    pub probability: Option<f64>,
    pub phase: Phase,
}

impl FrameResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("frame result serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub result: FrameResult,
    pub events: Vec<EventRecord>,
    /// Analysis time, excluding decoding the frame off the wire.
    pub seconds: f64,
}

/// One session: shared analyzer plus its own workflow state.
#[derive(Debug)]
pub struct Pipeline {
    pub analyzer: Arc<Analyzer>,
    workflow: Workflow,
    seen: u64,
}

impl Pipeline {
    pub fn new(analyzer: Arc<Analyzer>) -> Result<Self> {
        let workflow = Workflow::new(analyzer.workflow_context())?;
        Ok(Self {
            analyzer,
            workflow,
            seen: 0,
        })
    }

    pub fn phase(&self) -> Phase {
        self.workflow.phase()
    }

    pub fn process(&mut self, frame: &Frame) -> Result<FrameOutput> {
        let every = self.analyzer.cfg.process_every_n_frames as u64;
        let skip = self.seen % every != 0;
        self.seen += 1;
        if skip {
            return Ok(FrameOutput {
                result: FrameResult {
                    frame_id: frame.frame_id,
                    timestamp_ms: frame.timestamp_ms,
                    skipped: true,
                    detections: Vec::new(),
                    hands: Vec::new(),
                    probability: None,
                    phase: self.phase(),
                },
                events: Vec::new(),
                seconds: 0.0,
            });
        }
        let start = Instant::now();
        let analysis = self.analyzer.analyze(frame)?;
        let seconds = start.elapsed().as_secs_f64();
        let obs = analysis.observation(frame.frame_id, frame.timestamp_ms);
        let events = self.workflow.observe(&obs)?;
        Ok(FrameOutput {
            result: FrameResult {
                frame_id: frame.frame_id,
                timestamp_ms: frame.timestamp_ms,
                skipped: false,
                detections: analysis.records(frame.frame_id),
                probability: analysis.technician_hands().map(|h| h.probability).reduce(f64::max),
                hands: analysis.hands,
                phase: self.phase(),
            },
            events,
            seconds,
        })
    }
}

/// Batch mode: results and the event log, in frame order.
pub fn run_frames<'a>(
    analyzer: Arc<Analyzer>,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<(Vec<FrameResult>, Vec<EventRecord>)> {
    let mut p = Pipeline::new(analyzer)?;
    let (mut results, mut events) = (Vec::new(), Vec::new());
    for f in frames {
        let out = p.process(f)?;
        results.push(out.result);
        events.extend(out.events);
    }
    Ok((results, events))
}

/// Match detected hands to labels (IoU ≥ 0.5) and score the image.
pub fn outcome(analysis: &Analysis, labels: &SceneLabels) -> ImageOutcome {
    let center_errors = labels
        .hands
        .iter()
        .filter(|h| h.technician && h.okay)
        .filter_map(|gt| {
            analysis
                .hands
                .iter()
                .map(|h| (h, iou(&analysis.detections[h.detection].bbox, &gt.bbox)))
                .filter(|(_, o)| *o >= 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(h, _)| (h.o_center - gt.o_center).norm())
        })
        .collect();
    ImageOutcome {
        label: labels.positive(),
        hand_detected: !analysis.hands.is_empty(),
        score: analysis.technician_hands().map(|h| h.probability).fold(0.0, f64::max),
        center_errors,
    }
}

/// Runs every frame through the analyzer on this thread and reports the
/// image-level metrics plus the median analysis rate.
pub fn evaluate_frames(analyzer: &Analyzer, frames: &[Frame], labels: &[SceneLabels]) -> Result<(EvalReport, Vec<ImageOutcome>)> {
    if frames.len() != labels.len() {
        return Err(Error::Shape(format!("{} frames for {} labels", frames.len(), labels.len())));
    }
    let mut outcomes = Vec::with_capacity(frames.len());
    let mut secs = Vec::with_capacity(frames.len());
    for (f, l) in frames.iter().zip(labels) {
        let start = Instant::now();
        let a = analyzer.analyze(f)?;
        secs.push(start.elapsed().as_secs_f64());
        outcomes.push(outcome(&a, l));
    }
    let fps = crate::eval::median(&secs).filter(|&s| s > 0.0).map(|s| 1.0 / s);
    Ok((summarize(&outcomes, analyzer.cfg.confirm.threshold, fps)?, outcomes))
}
