//! Anchor-grid decoding for boxes, class, hand angle and hand-to-body
//! association, plus NMS, association matching and the patient filter.

use crate::error::{Error, Result};
use crate::geometry::{iob, iou, Angle, BBox, Point2};
use serde::{Deserialize, Serialize};

/// tx, ty, tw, th, objectness, hand logit, body logit, sin, cos, dx, dy.
pub const CHANNELS_PER_ANCHOR: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Hand,
    Body,
}

impl Class {
    pub fn index(self) -> usize {
        match self {
            Class::Hand => 0,
            Class::Body => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub bbox: BBox,
    pub cls: Class,
    pub score: f64,
    /// Hands only.
    pub angle: Option<Angle>,
    /// Hands only: hand center to body center, pixels.
    pub assoc: Option<Point2>,
}

impl DetectedObject {
    pub fn predicted_body_center(&self) -> Option<Point2> {
        self.assoc.map(|a| self.bbox.center() + a)
    }
}

/// Ground truth in scene pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub cls: Class,
    pub angle: Option<Angle>,
    pub body_center: Option<Point2>,
}

/// Grid geometry. Anchors are in input pixels; `scale` maps input pixels
/// to scene pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub scale: f64,
    pub anchors: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn channels(&self) -> usize {
        self.anchors.len() * CHANNELS_PER_ANCHOR
    }

    pub fn slots(&self) -> usize {
        self.anchors.len() * self.rows * self.cols
    }

    pub fn cell_center(&self, gx: usize, gy: usize) -> Point2 {
        Point2::new((gx as f64 + 0.5) * self.stride, (gy as f64 + 0.5) * self.stride)
    }
}

/// Raw head output for one image, laid out `[A * 11, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub spec: GridSpec,
    pub data: Vec<f32>,
}

impl RawGrid {
    pub fn new(spec: GridSpec, data: Vec<f32>) -> Result<Self> {
        let expect = spec.channels() * spec.rows * spec.cols;
        if data.len() != expect {
            return Err(Error::ChannelCount {
                got: data.len() / (spec.rows * spec.cols).max(1),
                expected: spec.channels(),
            });
        }
        Ok(Self { spec, data })
    }

    #[inline]
    pub fn index(&self, anchor: usize, ch: usize, gy: usize, gx: usize) -> usize {
        ((anchor * CHANNELS_PER_ANCHOR + ch) * self.spec.rows + gy) * self.spec.cols + gx
    }

    #[inline]
    pub fn get(&self, anchor: usize, ch: usize, gy: usize, gx: usize) -> f32 {
        self.data[self.index(anchor, ch, gy, gx)]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Predicted box of one slot in input pixels.
pub fn slot_box(spec: &GridSpec, anchor: usize, gx: usize, gy: usize, t: [f64; 4]) -> (Point2, f64, f64) {
    let (aw, ah) = spec.anchors[anchor];
    let c = Point2::new(
        (gx as f64 + sigmoid(t[0])) * spec.stride,
        (gy as f64 + sigmoid(t[1])) * spec.stride,
    );
    (c, aw * t[2].min(10.0).exp(), ah * t[3].min(10.0).exp())
}

/// Every slot whose `objectness * class probability` reaches `conf_thresh`.
pub fn decode(raw: &RawGrid, conf_thresh: f64) -> Result<Vec<DetectedObject>> {
    if !(conf_thresh > 0.0 && conf_thresh < 1.0) {
        return Err(Error::Invalid(format!("conf_thresh {conf_thresh} outside (0, 1)")));
    }
    let spec = &raw.spec;
    let k = spec.scale;
    let mut out = Vec::new();
    for a in 0..spec.anchors.len() {
        for gy in 0..spec.rows {
            for gx in 0..spec.cols {
                let ch = |c: usize| raw.get(a, c, gy, gx) as f64;
                let obj = sigmoid(ch(4));
                let (cls, logit) = if ch(5) >= ch(6) {
                    (Class::Hand, ch(5))
                } else {
                    (Class::Body, ch(6))
                };
                let score = obj * sigmoid(logit);
                if !(score >= conf_thresh) {
                    continue;
                }
                let (c, w, h) = slot_box(spec, a, gx, gy, [ch(0), ch(1), ch(2), ch(3)]);
                let Ok(bbox) = BBox::from_center(c * k, w * k, h * k) else {
                    continue;
                };
                let (angle, assoc) = if cls == Class::Hand {
                    let body = spec.cell_center(gx, gy) + Point2::new(ch(9), ch(10)) * spec.stride;
                    (Some(Angle::from_sin_cos(ch(7), ch(8))), Some(body * k - bbox.center()))
                } else {
                    (None, None)
                };
                out.push(DetectedObject {
                    bbox,
                    cls,
                    score,
                    angle,
                    assoc,
                });
            }
        }
    }
    Ok(out)
}

fn shape_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

/// Responsible slot for each ground-truth object: the cell containing its
/// center and the best-shaped free anchor. Objects that find no free
/// anchor are left unassigned.
pub fn assign(gts: &[GtObject], spec: &GridSpec) -> Vec<Option<(usize, usize, usize)>> {
    let mut taken = vec![false; spec.slots()];
    gts.iter()
        .map(|g| {
            let c = g.bbox.center() * (1.0 / spec.scale);
            let gx = ((c.x / spec.stride).floor().max(0.0) as usize).min(spec.cols - 1);
            let gy = ((c.y / spec.stride).floor().max(0.0) as usize).min(spec.rows - 1);
            let (w, h) = (g.bbox.width() / spec.scale, g.bbox.height() / spec.scale);
            let mut order: Vec<usize> = (0..spec.anchors.len()).collect();
            order.sort_by(|&a, &b| {
                let (sa, sb) = (
                    shape_iou(w, h, spec.anchors[a].0, spec.anchors[a].1),
                    shape_iou(w, h, spec.anchors[b].0, spec.anchors[b].1),
                );
                sb.total_cmp(&sa)
            });
            for a in order {
                let slot = (a * spec.rows + gy) * spec.cols + gx;
                if !taken[slot] {
                    taken[slot] = true;
                    return Some((a, gx, gy));
                }
            }
            None
        })
        .collect()
}

/// Regression targets of one assigned object in input-pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotTarget {
    pub frac: (f64, f64),
    pub log_wh: (f64, f64),
    pub bbox_in: [f64; 4],
    pub sin_cos: Option<(f64, f64)>,
    pub assoc: Option<(f64, f64)>,
}

pub fn slot_target(g: &GtObject, spec: &GridSpec, a: usize, gx: usize, gy: usize) -> SlotTarget {
    let k = spec.scale;
    let c = g.bbox.center() * (1.0 / k);
    let (w, h) = (g.bbox.width() / k, g.bbox.height() / k);
    let (aw, ah) = spec.anchors[a];
    let cell = spec.cell_center(gx, gy);
    SlotTarget {
        frac: (c.x / spec.stride - gx as f64, c.y / spec.stride - gy as f64),
        log_wh: ((w / aw).ln(), (h / ah).ln()),
        bbox_in: [c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0],
        sin_cos: g.angle.map(|t| (t.rad().sin(), t.rad().cos())),
        assoc: g.body_center.map(|b| {
            let b = b * (1.0 / k);
            ((b.x - cell.x) / spec.stride, (b.y - cell.y) / spec.stride)
        }),
    }
}

/// Raw grid that decodes back to `gts` (saturated logits elsewhere).
pub fn encode(gts: &[GtObject], spec: &GridSpec) -> RawGrid {
    let mut raw = RawGrid {
        spec: spec.clone(),
        data: vec![0.0; spec.channels() * spec.rows * spec.cols],
    };
    for a in 0..spec.anchors.len() {
        for gy in 0..spec.rows {
            for gx in 0..spec.cols {
                let i = raw.index(a, 4, gy, gx);
                raw.data[i] = -30.0;
            }
        }
    }
    for (g, slot) in gts.iter().zip(assign(gts, spec)) {
        let Some((a, gx, gy)) = slot else { continue };
        let t = slot_target(g, spec, a, gx, gy);
        let clampf = |f: f64| f.clamp(1e-6, 1.0 - 1e-6);
        let mut set = |ch: usize, v: f64| {
            let i = raw.index(a, ch, gy, gx);
            raw.data[i] = v as f32;
        };
        set(0, logit(clampf(t.frac.0)));
        set(1, logit(clampf(t.frac.1)));
        set(2, t.log_wh.0);
        set(3, t.log_wh.1);
        set(4, 30.0);
        let (h, b) = if g.cls == Class::Hand { (30.0, -30.0) } else { (-30.0, 30.0) };
        set(5, h);
        set(6, b);
        let (s, c) = t.sin_cos.unwrap_or((0.0, 1.0));
        set(7, s);
        set(8, c);
        let (dx, dy) = t.assoc.unwrap_or((0.0, 0.0));
        set(9, dx);
        set(10, dy);
    }
    raw
}

/// Greedy per-class suppression in descending score order; ties keep the
/// earlier object. Returns surviving indices into `objects`.
pub fn nms_indices(objects: &[DetectedObject], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].score.total_cmp(&objects[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep
            .iter()
            .any(|&k| objects[k].cls == objects[i].cls && iou(&objects[k].bbox, &objects[i].bbox) > iou_thresh);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(objects: &[DetectedObject], iou_thresh: f64) -> Vec<DetectedObject> {
    nms_indices(objects, iou_thresh)
        .into_iter()
        .map(|i| objects[i].clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub hand_index: usize,
    pub body_index: Option<usize>,
    /// Distance from the predicted to the nearest body center; infinite
    /// when there are no bodies.
    pub residual: f64,
}

/// Match each hand to the body whose center is closest to
/// `hand center + assoc`; equal residuals go to the higher-scoring body.
/// The match holds only within `max_residual_ratio` of that body's diagonal.
pub fn associate(hands: &[DetectedObject], bodies: &[DetectedObject], max_residual_ratio: f64) -> Vec<Association> {
    hands
        .iter()
        .enumerate()
        .map(|(hi, h)| {
            let target = h.predicted_body_center().unwrap_or_else(|| h.bbox.center());
            let mut best: Option<(usize, f64)> = None;
            for (bi, b) in bodies.iter().enumerate() {
                let r = (target - b.bbox.center()).norm();
                best = match best {
                    None => Some((bi, r)),
                    Some((pb, pr)) if r < pr || (r == pr && b.score > bodies[pb].score) => Some((bi, r)),
                    keep => keep,
                };
            }
            match best {
                Some((bi, r)) if r <= max_residual_ratio * bodies[bi].bbox.diagonal() => Association {
                    hand_index: hi,
                    body_index: Some(bi),
                    residual: r,
                },
                Some((_, r)) => Association {
                    hand_index: hi,
                    body_index: None,
                    residual: r,
                },
                None => Association {
                    hand_index: hi,
                    body_index: None,
                    residual: f64::INFINITY,
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub patients: Vec<usize>,
    pub technicians: Vec<usize>,
}

/// A body is a patient iff `iob(body, bed) > threshold`.
pub fn filter_patient(bodies: &[BBox], bed: &BBox, threshold: f64) -> Partition {
    let mut p = Partition::default();
    for (i, b) in bodies.iter().enumerate() {
        if iob(b, bed) > threshold {
            p.patients.push(i);
        } else {
            p.technicians.push(i);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec {
            rows: 4,
            cols: 4,
            stride: 16.0,
            scale: 2.0,
            anchors: vec![(20.0, 20.0), (45.0, 55.0)],
        }
    }

    #[test]
    fn malformed_grid_is_rejected() {
        assert!(matches!(
            RawGrid::new(spec(), vec![0.0; 10]),
            Err(Error::ChannelCount { .. })
        ));
    }

    #[test]
    fn negative_infinite_objectness_decodes_to_nothing() {
        let s = spec();
        let mut raw = RawGrid::new(s.clone(), vec![0.0; s.channels() * 16]).unwrap();
        for a in 0..2 {
            for gy in 0..4 {
                for gx in 0..4 {
                    let i = raw.index(a, 4, gy, gx);
                    raw.data[i] = f32::NEG_INFINITY;
                }
            }
        }
        assert!(decode(&raw, 0.25).unwrap().is_empty());
    }

    #[test]
    fn iob_boundary_is_technician() {
        let bed = BBox::new(0.0, 0.0, 10.0, 6.5).unwrap();
        let body = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(filter_patient(&[body], &bed, 0.65).technicians, vec![0]);
    }
}
