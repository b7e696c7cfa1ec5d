use super::ensure;
use handcue::geometry::{pixel_depth_to_scanner, CameraCalibration, Point2, Point3};
use handcue::workflow::*;
use handcue_tensor::{Rng, Stream};

/// Independent twin of the confirmation machine, written as one match
/// over an enum that carries its own data.
#[derive(Clone, Debug)]
pub enum Twin {
    Idle,
    Confirming {
        start: u64,
        last: u64,
        count: usize,
        centers: Vec<(f64, f64, f64)>,
    },
    Confirmed,
    Cancelled,
}

pub fn twin_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn twin_target(centers: &[(f64, f64, f64)], ctx: &WorkflowContext) -> Option<Point3> {
    let ok: Vec<(f64, f64, f64)> = centers.iter().copied().filter(|c| c.2 > 0.0 && c.2.is_finite()).collect();
    if ok.is_empty() {
        return None;
    }
    let (u, v, d) = match ctx.cfg.center_smoothing {
        CenterSmoothing::Last => *ok.last().unwrap(),
        CenterSmoothing::Median => (
            twin_median(ok.iter().map(|c| c.0).collect()),
            twin_median(ok.iter().map(|c| c.1).collect()),
            twin_median(ok.iter().map(|c| c.2).collect()),
        ),
    };
    pixel_depth_to_scanner(u, v, d, &ctx.calib).ok()
}

pub fn twin_step(state: Twin, obs: &FrameObservation, ctx: &WorkflowContext) -> (Twin, Vec<Event>) {
    let cfg = &ctx.cfg;
    let mut best: Option<OkDetection> = None;
    for d in &obs.detections {
        if d.probability >= cfg.threshold && best.is_none_or(|b| d.probability > b.probability) {
            best = Some(*d);
        }
    }
    let t = obs.timestamp_ms;
    let mut ev = Vec::new();
    let state = if let Twin::Cancelled = state {
        ev.push(Event::Transition { from: Phase::Cancelled, to: Phase::Idle });
        Twin::Idle
    } else {
        state
    };
    let next = match (state, best) {
        (Twin::Idle, None) => Twin::Idle,
        (Twin::Idle, Some(d)) => {
            ev.push(Event::Transition { from: Phase::Idle, to: Phase::Confirming });
            ev.push(Event::PromptOn);
            Twin::Confirming { start: t, last: t, count: 1, centers: vec![(d.center.x, d.center.y, d.depth)] }
        }
        (Twin::Confirming { last, .. }, _) if t - last > cfg.max_gap_ms => {
            ev.push(Event::Diagnostic { message: format!("gesture lost for {} ms", t - last) });
            ev.push(Event::PromptOff);
            ev.push(Event::Transition { from: Phase::Confirming, to: Phase::Cancelled });
            Twin::Cancelled
        }
        (s @ Twin::Confirming { .. }, None) => s,
        (Twin::Confirming { start, count, mut centers, .. }, Some(d)) => {
            centers.push((d.center.x, d.center.y, d.depth));
            let count = count + 1;
            if t - start < cfg.window_ms || count < cfg.min_detections {
                Twin::Confirming { start, last: t, count, centers }
            } else if let Some(target) = twin_target(&centers, ctx) {
                ev.push(Event::PromptOff);
                ev.push(Event::Transition { from: Phase::Confirming, to: Phase::Confirmed });
                ev.push(Event::Command {
                    command: MotionCommand { frame_id: obs.frame_id, target, displacement: ctx.iso_center - target },
                });
                Twin::Confirmed
            } else {
                ev.push(Event::Diagnostic { message: String::new() });
                ev.push(Event::PromptOff);
                ev.push(Event::Transition { from: Phase::Confirming, to: Phase::Cancelled });
                Twin::Cancelled
            }
        }
        (Twin::Confirmed, Some(_)) => Twin::Confirmed,
        (Twin::Confirmed, None) => {
            ev.push(Event::Transition { from: Phase::Confirmed, to: Phase::Idle });
            Twin::Idle
        }
        (Twin::Cancelled, _) => unreachable!(),
    };
    (next, ev)
}

pub fn twin_phase(t: &Twin) -> Phase {
    match t {
        Twin::Idle => Phase::Idle,
        Twin::Confirming { .. } => Phase::Confirming,
        Twin::Confirmed => Phase::Confirmed,
        Twin::Cancelled => Phase::Cancelled,
    }
}

/// Diagnostics carry free text; compare their kind only.
pub fn same_events(a: &[Event], b: &[Event]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Event::Diagnostic { .. }, Event::Diagnostic { .. }) => true,
            _ => x == y,
        })
}

pub fn context(rng: &mut Rng) -> WorkflowContext {
    let window_ms = [1000, 3000][rng.below(2)];
    WorkflowContext {
        cfg: ConfirmConfig {
            threshold: 0.5,
            window_ms,
            min_detections: 1 + rng.below(10),
            max_gap_ms: [200, 600][rng.below(2)],
            center_smoothing: if rng.chance(0.5) { CenterSmoothing::Median } else { CenterSmoothing::Last },
        },
        calib: CameraCalibration::default(),
        iso_center: Point3::new(0.0, 0.0, 0.0),
    }
}

pub fn observation(rng: &mut Rng, frame_id: u64, ts: u64, p_ok: f64) -> FrameObservation {
    let n = rng.below(3);
    let detections = (0..n)
        .map(|_| OkDetection {
            probability: if rng.chance(p_ok) { rng.uniform(0.5, 1.0) } else { rng.uniform(0.0, 0.5) },
            center: Point2::new(rng.uniform(150.0, 300.0), rng.uniform(150.0, 300.0)),
            depth: if rng.chance(0.1) { 0.0 } else { rng.uniform(1400.0, 1800.0) },
        })
        .collect();
    FrameObservation { frame_id, timestamp_ms: ts, detections }
}

pub fn random_sequence(rng: &mut Rng, len: usize) -> Vec<FrameObservation> {
    let mut ts = 0;
    let p_ok = rng.uniform(0.3, 1.0);
    (0..len)
        .map(|i| {
            ts += if rng.chance(0.05) { rng.below(1500) as u64 } else { rng.below(250) as u64 };
            observation(rng, i as u64, ts, p_ok)
        })
        .collect()
}

/// Library machine against the twin on `n` random sequences, checking
/// safety and at-most-once along the way. Returns the commands issued.
pub fn trace_equivalence(seed: u64, n: usize) -> Result<usize, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut commands = 0;
    for k in 0..n {
        let ctx = context(&mut rng);
        let len = 5 + rng.below(50);
        let seq = random_sequence(&mut rng, len);
        let mut wf = Workflow::new(ctx.clone()).map_err(|e| e.to_string())?;
        let mut twin = Twin::Idle;
        let mut in_episode = 0;
        for obs in &seq {
            let before = wf.phase();
            let recs = wf.observe(obs).map_err(|e| e.to_string())?;
            let events: Vec<Event> = recs.iter().map(|r| r.event.clone()).collect();
            let (next, tev) = twin_step(twin, obs, &ctx);
            twin = next;
            ensure(same_events(&events, &tev), || format!("sequence {k}: events {events:?} vs twin {tev:?}"))?;
            ensure(wf.phase() == twin_phase(&twin), || format!("sequence {k}: phase differs"))?;
            let n_cmd = events.iter().filter(|e| matches!(e, Event::Command { .. })).count();
            if n_cmd > 0 {
                // Safety: commands only on the step that enters Confirmed.
                ensure(n_cmd == 1 && before == Phase::Confirming && wf.phase() == Phase::Confirmed, || {
                    format!("sequence {k}: command outside the Confirming -> Confirmed step")
                })?;
            }
            if events.contains(&Event::Transition { from: Phase::Idle, to: Phase::Confirming }) {
                in_episode = 0;
            }
            in_episode += n_cmd;
            ensure(in_episode <= 1, || format!("sequence {k}: second command in one episode"))?;
            commands += n_cmd;
        }
    }
    Ok(commands)
}

/// A gesture held long enough always confirms, whatever came before.
pub fn liveness(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    for k in 0..n {
        let ctx = context(&mut rng);
        let prefix_len = rng.below(30);
        let mut seq = random_sequence(&mut rng, prefix_len);
        let mut ts = seq.last().map_or(0, |o| o.timestamp_ms);
        let mut id = seq.len() as u64;
        // One empty frame releases a previous confirmation.
        ts += 100;
        seq.push(FrameObservation { frame_id: id, timestamp_ms: ts, detections: vec![] });
        id += 1;
        let interval = 1 + rng.below(ctx.cfg.max_gap_ms as usize) as u64;
        let need = (ctx.cfg.window_ms / interval) as usize + ctx.cfg.min_detections + 3;
        let run_start = seq.len();
        for _ in 0..need {
            ts += interval;
            seq.push(FrameObservation {
                frame_id: id,
                timestamp_ms: ts,
                detections: vec![OkDetection { probability: 0.9, center: Point2::new(200.0, 220.0), depth: 1500.0 }],
            });
            id += 1;
        }
        let mut wf = Workflow::new(ctx).map_err(|e| e.to_string())?;
        let mut fired = false;
        for (i, obs) in seq.iter().enumerate() {
            let recs = wf.observe(obs).map_err(|e| e.to_string())?;
            fired |= i >= run_start && recs.iter().any(|r| matches!(r.event, Event::Command { .. }));
        }
        ensure(fired, || format!("case {k}: no command after a sustained gesture"))?;
    }
    Ok(())
}
