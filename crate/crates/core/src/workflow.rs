//! Confirmation state machine turning sustained "okay" gestures into a
//! single table motion command.

use crate::error::{Error, Result};
use crate::eval::median;
use crate::geometry::{pixel_depth_to_scanner, CameraCalibration, Point2, Point3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Confirming,
    Confirmed,
    Cancelled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSmoothing {
    Last,
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfirmConfig {
    /// Gesture probability threshold `T`.
    pub threshold: f64,
    pub window_ms: u64,
    pub min_detections: usize,
    pub max_gap_ms: u64,
    pub center_smoothing: CenterSmoothing,
}

impl Default for ConfirmConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            window_ms: 3000,
            min_detections: 10,
            max_gap_ms: 600,
            center_smoothing: CenterSmoothing::Median,
        }
    }
}

impl ConfirmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_detections == 0 {
            return Err(Error::Config("min_detections must be at least 1".into()));
        }
        if self.max_gap_ms >= self.window_ms {
            return Err(Error::Config(format!(
                "max_gap_ms {} must be below window_ms {}",
                self.max_gap_ms, self.window_ms
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// One technician hand's gesture reading in a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OkDetection {
    pub probability: f64,
    /// "O" center, pixels.
    pub center: Point2,
    /// Sensor units; non-positive or non-finite means missing.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    /// Technician hands only.
    pub detections: Vec<OkDetection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionCommand {
    pub frame_id: u64,
    /// Scanner frame, meters.
    pub target: Point3,
    pub displacement: Point3,
}

impl MotionCommand {
    /// Single-line JSON with six decimals on every coordinate.
    pub fn to_json_line(&self) -> String {
        let (t, d) = (self.target, self.displacement);
        format!(
            "{{\"frame_id\":{},\"target\":[{:.6},{:.6},{:.6}],\"displacement\":[{:.6},{:.6},{:.6}]}}",
            self.frame_id, t.x, t.y, t.z, d.x, d.y, d.z
        )
    }
}

pub fn compute_displacement(target: Point3, iso_center: Point3) -> Point3 {
    iso_center - target
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Transition { from: Phase, to: Phase },
    PromptOn,
    PromptOff,
    Command { command: MotionCommand },
    Diagnostic { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp_ms: u64,
    pub frame_id: u64,
    /// Highest gesture probability among the frame's technician hands.
    pub probability: Option<f64>,
    #[serde(flatten)]
    pub event: Event,
}

impl EventRecord {
    pub fn to_json_line(&self) -> String {
        match &self.event {
            Event::Command { command } => format!(
                "{{\"timestamp_ms\":{},\"frame_id\":{},\"probability\":{},\"kind\":\"command\",\"command\":{}}}",
                self.timestamp_ms,
                self.frame_id,
                self.probability.map_or("null".to_string(), |p| format!("{p:.6}")),
                command.to_json_line()
            ),
            _ => serde_json::to_string(self).expect("event serializes"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub phase: Phase,
    pub window_start: Option<u64>,
    pub last_ok: Option<u64>,
    pub ok_streak: usize,
    /// `(u, v, depth)` of every accepted detection in the window.
    pub centers: Vec<(f64, f64, f64)>,
    pub last_timestamp: Option<u64>,
}

impl Default for WorkflowState {
    fn default() -> Self {
        Self {
            phase: Phase::Idle,
            window_start: None,
            last_ok: None,
            ok_streak: 0,
            centers: Vec::new(),
            last_timestamp: None,
        }
    }
}

/// Everything besides the state that a transition depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkflowContext {
    pub cfg: ConfirmConfig,
    pub calib: CameraCalibration,
    /// Scanner frame, meters.
    pub iso_center: Point3,
}

fn best_ok(obs: &FrameObservation, threshold: f64) -> Option<OkDetection> {
    obs.detections
        .iter()
        .filter(|d| d.probability >= threshold)
        .fold(None, |best: Option<OkDetection>, d| match best {
            Some(b) if b.probability >= d.probability => Some(b),
            _ => Some(*d),
        })
}

fn smoothed_center(centers: &[(f64, f64, f64)], mode: CenterSmoothing) -> Option<(f64, f64, f64)> {
    let valid: Vec<&(f64, f64, f64)> = centers.iter().filter(|c| c.2.is_finite() && c.2 > 0.0).collect();
    match mode {
        CenterSmoothing::Last => valid.last().map(|c| **c),
        CenterSmoothing::Median => {
            let us: Vec<f64> = valid.iter().map(|c| c.0).collect();
            let vs: Vec<f64> = valid.iter().map(|c| c.1).collect();
            let ds: Vec<f64> = valid.iter().map(|c| c.2).collect();
            Some((median(&us)?, median(&vs)?, median(&ds)?))
        }
    }
}

/// One transition. `Cancelled` lasts until the next observation, which is
/// then handled as if the machine were `Idle`.
pub fn step(state: &WorkflowState, obs: &FrameObservation, ctx: &WorkflowContext) -> Result<(WorkflowState, Vec<Event>)> {
    if let Some(prev) = state.last_timestamp {
        if obs.timestamp_ms < prev {
            return Err(Error::NonMonotone {
                prev,
                next: obs.timestamp_ms,
            });
        }
    }
    let cfg = &ctx.cfg;
    let ts = obs.timestamp_ms;
    let ok = best_ok(obs, cfg.threshold);
    let mut events = Vec::new();
    let mut s = state.clone();
    s.last_timestamp = Some(ts);

    let start_window = |s: &mut WorkflowState, d: &OkDetection| {
        s.phase = Phase::Confirming;
        s.window_start = Some(ts);
        s.last_ok = Some(ts);
        s.ok_streak = 1;
        s.centers = vec![(d.center.x, d.center.y, d.depth)];
    };
    let reset = |s: &mut WorkflowState| {
        s.phase = Phase::Idle;
        s.window_start = None;
        s.last_ok = None;
        s.ok_streak = 0;
        s.centers.clear();
    };
    let cancel = |s: &mut WorkflowState, events: &mut Vec<Event>, why: String| {
        events.push(Event::Diagnostic { message: why });
        events.push(Event::PromptOff);
        events.push(Event::Transition {
            from: Phase::Confirming,
            to: Phase::Cancelled,
        });
        reset(s);
        s.phase = Phase::Cancelled;
    };

    if s.phase == Phase::Cancelled {
        events.push(Event::Transition {
            from: Phase::Cancelled,
            to: Phase::Idle,
        });
        reset(&mut s);
    }

    match s.phase {
        Phase::Idle => {
            if let Some(d) = ok {
                start_window(&mut s, &d);
                events.push(Event::Transition {
                    from: Phase::Idle,
                    to: Phase::Confirming,
                });
                events.push(Event::PromptOn);
            }
        }
        Phase::Confirming => {
            let last = s.last_ok.expect("confirming has a last detection");
            let gap = ts - last;
            match ok {
                _ if gap > cfg.max_gap_ms => {
                    cancel(&mut s, &mut events, format!("gesture lost for {gap} ms"));
                }
                None => {}
                Some(d) => {
                    s.last_ok = Some(ts);
                    s.ok_streak += 1;
                    s.centers.push((d.center.x, d.center.y, d.depth));
                    let start = s.window_start.expect("confirming has a window");
                    if ts - start >= cfg.window_ms && s.ok_streak >= cfg.min_detections {
                        let target = smoothed_center(&s.centers, cfg.center_smoothing)
                            .ok_or(Error::InvalidDepth(f64::NAN))
                            .and_then(|(u, v, z)| pixel_depth_to_scanner(u, v, z, &ctx.calib));
                        match target {
                            Ok(target) => {
                                s.phase = Phase::Confirmed;
                                events.push(Event::PromptOff);
                                events.push(Event::Transition {
                                    from: Phase::Confirming,
                                    to: Phase::Confirmed,
                                });
                                events.push(Event::Command {
                                    command: MotionCommand {
                                        frame_id: obs.frame_id,
                                        target,
                                        displacement: compute_displacement(target, ctx.iso_center),
                                    },
                                });
                            }
                            Err(e) => cancel(&mut s, &mut events, format!("no valid target at confirmation: {e}")),
                        }
                    }
                }
            }
        }
        Phase::Confirmed => {
            if ok.is_none() {
                events.push(Event::Transition {
                    from: Phase::Confirmed,
                    to: Phase::Idle,
                });
                reset(&mut s);
            }
        }
        Phase::Cancelled => unreachable!("cancelled resolves before dispatch"),
    }
    Ok((s, events))
}

/// Stateful wrapper that also builds the event log.
#[derive(Clone, Debug)]
pub struct Workflow {
    pub ctx: WorkflowContext,
    pub state: WorkflowState,
}

impl Workflow {
    pub fn new(ctx: WorkflowContext) -> Result<Self> {
        ctx.cfg.validate()?;
        ctx.calib.validate()?;
        Ok(Self {
            ctx,
            state: WorkflowState::default(),
        })
    }

    pub fn observe(&mut self, obs: &FrameObservation) -> Result<Vec<EventRecord>> {
        let (next, events) = step(&self.state, obs, &self.ctx)?;
        self.state = next;
        let probability = obs.detections.iter().map(|d| d.probability).reduce(f64::max);
        Ok(events
            .into_iter()
            .map(|event| EventRecord {
                timestamp_ms: obs.timestamp_ms,
                frame_id: obs.frame_id,
                probability,
                event,
            })
            .collect())
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }
}
