//! Toy single-scale detector: conv backbone, 1x1 head emitting a raw
//! anchor grid, composite loss and mAP evaluation.

use crate::detect::{
    assign, decode, nms, sigmoid, slot_box, slot_target, Class, DetectedObject, GridSpec, GtObject, RawGrid,
    CHANNELS_PER_ANCHOR,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, Angle, BBox, Point2};
use crate::image::Image;
use crate::synth::SceneSample;
use crate::train::{self, TrainConfig};
use handcue_tensor::{Checkpoint, Conv2d, Graph, Params, Rng, Stream, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetLossWeights {
    pub bbox: f64,
    pub objectness: f64,
    pub class: f64,
    pub angle: f64,
    pub assoc: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        Self {
            bbox: 1.0,
            objectness: 1.0,
            class: 1.0,
            angle: 2.0,
            assoc: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub scene_size: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Anchor `(w, h)` in scene pixels.
    pub anchors: Vec<(f64, f64)>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_residual_ratio: f64,
    pub patient_iob: f64,
    pub loss: DetLossWeights,
    /// Train on random quarter-turn rotations of each image.
    pub rotate_augment: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            scene_size: 448,
            input_size: 224,
            channels: vec![16, 32, 48, 64, 64, 64],
            kernels: vec![3, 3, 3, 3, 5, 5],
            strides: vec![2, 2, 2, 2, 1, 1],
            anchors: vec![(40.0, 40.0), (84.0, 100.0), (110.0, 260.0)],
            conf_thresh: 0.25,
            nms_iou: 0.45,
            max_residual_ratio: 0.5,
            patient_iob: 0.65,
            loss: DetLossWeights::default(),
            rotate_augment: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Config("detector layer lists must be nonempty and equally long".into()));
        }
        if self.input_size == 0 || self.scene_size % self.input_size != 0 {
            return Err(Error::Config(format!(
                "scene size {} is not a multiple of input size {}",
                self.scene_size, self.input_size
            )));
        }
        if self.input_size % self.total_stride() != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a multiple of the total stride {}",
                self.input_size,
                self.total_stride()
            )));
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::Config("anchors must be positive".into()));
        }
        for (name, v) in [
            ("conf_thresh", self.conf_thresh),
            ("nms_iou", self.nms_iou),
            ("patient_iob", self.patient_iob),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn factor(&self) -> usize {
        self.scene_size / self.input_size
    }

    pub fn grid(&self) -> GridSpec {
        let k = self.factor() as f64;
        let cells = self.input_size / self.total_stride();
        GridSpec {
            rows: cells,
            cols: cells,
            stride: self.total_stride() as f64,
            scale: k,
            anchors: self.anchors.iter().map(|&(w, h)| (w / k, h / k)).collect(),
        }
    }
}

/// One training image at detector resolution, planar u8, plus its labels
/// in scene pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub gts: Vec<GtObject>,
}

/// Detector input from a scene image: quantize like a camera frame, then
/// box-downsample and quantize again.
pub fn detector_input(scene: &Image, cfg: &DetectorConfig) -> Result<Vec<u8>> {
    let quantized = Image::from_rgb8(scene.width, scene.height, &scene.to_rgb8())?;
    let small = if cfg.factor() == 1 {
        quantized
    } else {
        quantized.downsample(cfg.factor())?
    };
    if small.width != cfg.input_size || small.height != cfg.input_size {
        return Err(Error::Shape(format!(
            "scene {}x{} does not match detector input {}",
            scene.width, scene.height, cfg.input_size
        )));
    }
    Ok(small.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

pub fn scene_ground_truth(scene: &SceneSample) -> Vec<GtObject> {
    let mut gts: Vec<GtObject> = scene
        .hands
        .iter()
        .map(|h| GtObject {
            bbox: h.bbox,
            cls: Class::Hand,
            angle: Some(h.angle),
            body_center: Some(scene.bodies[h.owner].bbox.center()),
        })
        .collect();
    gts.extend(scene.bodies.iter().map(|b| GtObject {
        bbox: b.bbox,
        cls: Class::Body,
        angle: None,
        body_center: None,
    }));
    gts
}

impl DetSample {
    pub fn from_scene(scene: &SceneSample, cfg: &DetectorConfig) -> Result<Self> {
        Ok(Self {
            size: cfg.input_size,
            pixels: detector_input(&scene.image, cfg)?,
            gts: scene_ground_truth(scene),
        })
    }

    /// The sample rotated clockwise by `quarter_turns * 90` degrees; labels
    /// live in a scene of side `scene_size`.
    pub fn rotated(&self, quarter_turns: usize, scene_size: f64) -> DetSample {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            out = out.rotated_once(scene_size);
        }
        out
    }

    fn rotated_once(&self, scene_size: f64) -> DetSample {
        let n = self.size;
        let mut pixels = vec![0u8; self.pixels.len()];
        for c in 0..3 {
            let plane = &self.pixels[c * n * n..(c + 1) * n * n];
            let dst = &mut pixels[c * n * n..(c + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    dst[x * n + (n - 1 - y)] = plane[y * n + x];
                }
            }
        }
        let turn = |p: Point2| Point2::new(scene_size - p.y, p.x);
        let gts = self
            .gts
            .iter()
            .map(|g| {
                let a = turn(Point2::new(g.bbox.l, g.bbox.t));
                let b = turn(Point2::new(g.bbox.r, g.bbox.b));
                GtObject {
                    bbox: BBox {
                        l: a.x.min(b.x),
                        t: a.y.min(b.y),
                        r: a.x.max(b.x),
                        b: a.y.max(b.y),
                    },
                    cls: g.cls,
                    angle: g.angle.map(|t| Angle::new(t.rad() + std::f64::consts::FRAC_PI_2)),
                    body_center: g.body_center.map(turn),
                }
            })
            .collect();
        DetSample {
            size: n,
            pixels,
            gts,
        }
    }
}

fn batch_tensor(samples: &[&[u8]], size: usize) -> Result<Tensor> {
    let n = 3 * size * size;
    let mut data = Vec::with_capacity(samples.len() * n);
    for s in samples {
        if s.len() != n {
            return Err(Error::Shape(format!("detector input of {} bytes, expected {n}", s.len())));
        }
        data.extend(s.iter().map(|&v| v as f32 / 255.0 - 0.5));
    }
    Ok(Tensor::new(&[samples.len(), 3, size, size], data)?)
}

/// Generalized-IoU loss `1 - GIoU` of corner boxes and its gradient with
/// respect to the predicted corners.
pub fn giou_loss(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let iw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih = p[3].min(g[3]) - p[1].max(g[1]);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 { (iw, ih, true) } else { (0.0, 0.0, false) };
    let inter = iw * ih;
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let union = pw * ph + area_g - inter;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    let mut grad = [0.0; 4];
    if overlap {
        grad[0] += d_inter * -ih * f64::from(p[0] > g[0]);
        grad[2] += d_inter * ih * f64::from(p[2] < g[2]);
        grad[1] += d_inter * -iw * f64::from(p[1] > g[1]);
        grad[3] += d_inter * iw * f64::from(p[3] < g[3]);
    }
    grad[0] += d_area * -ph;
    grad[2] += d_area * ph;
    grad[1] += d_area * -pw;
    grad[3] += d_area * pw;
    grad[0] += d_hull * -ch * f64::from(p[0] < g[0]);
    grad[2] += d_hull * ch * f64::from(p[2] > g[2]);
    grad[1] += d_hull * -cw * f64::from(p[1] < g[1]);
    grad[3] += d_hull * cw * f64::from(p[3] > g[3]);
    (loss, grad)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy on a logit and its derivative.
fn bce(logit: f64, target: f64) -> (f64, f64) {
    (softplus(logit) - target * logit, sigmoid(logit) - target)
}

/// Composite loss of one raw grid and its gradient, each scaled by `norm`.
pub fn grid_loss(raw: &RawGrid, gts: &[GtObject], w: &DetLossWeights, norm: f64) -> (f64, Vec<f32>) {
    let spec = &raw.spec;
    let mut grad = vec![0.0f64; raw.data.len()];
    let mut positive = vec![false; spec.slots()];
    let mut loss = 0.0;

    for (g, slot) in gts.iter().zip(assign(gts, spec)) {
        let Some((a, gx, gy)) = slot else { continue };
        positive[(a * spec.rows + gy) * spec.cols + gx] = true;
        let t = slot_target(g, spec, a, gx, gy);
        let v = |c: usize| raw.get(a, c, gy, gx) as f64;

        let (c, bw, bh) = slot_box(spec, a, gx, gy, [v(0), v(1), v(2), v(3)]);
        let pred = [c.x - bw / 2.0, c.y - bh / 2.0, c.x + bw / 2.0, c.y + bh / 2.0];
        let (lb, gb) = giou_loss(pred, t.bbox_in);
        loss += w.bbox * lb;
        let d_cx = gb[0] + gb[2];
        let d_cy = gb[1] + gb[3];
        let d_w = (gb[2] - gb[0]) / 2.0;
        let d_h = (gb[3] - gb[1]) / 2.0;
        let (sx, sy) = (sigmoid(v(0)), sigmoid(v(1)));
        let tw_live = v(2) < 10.0;
        let th_live = v(3) < 10.0;
        grad[raw.index(a, 0, gy, gx)] += w.bbox * d_cx * spec.stride * sx * (1.0 - sx);
        grad[raw.index(a, 1, gy, gx)] += w.bbox * d_cy * spec.stride * sy * (1.0 - sy);
        grad[raw.index(a, 2, gy, gx)] += w.bbox * d_w * bw * f64::from(tw_live);
        grad[raw.index(a, 3, gy, gx)] += w.bbox * d_h * bh * f64::from(th_live);

        for (ch, target) in [(5, g.cls == Class::Hand), (6, g.cls == Class::Body)] {
            let (l, d) = bce(v(ch), f64::from(target));
            loss += w.class * l;
            grad[raw.index(a, ch, gy, gx)] += w.class * d;
        }
        if let Some((s, co)) = t.sin_cos {
            for (ch, target) in [(7, s), (8, co)] {
                let e = v(ch) - target;
                loss += w.angle * e * e;
                grad[raw.index(a, ch, gy, gx)] += w.angle * 2.0 * e;
            }
        }
        if let Some((dx, dy)) = t.assoc {
            for (ch, target) in [(9, dx), (10, dy)] {
                let e = v(ch) - target;
                loss += w.assoc * e * e;
                grad[raw.index(a, ch, gy, gx)] += w.assoc * 2.0 * e;
            }
        }
    }

    for a in 0..spec.anchors.len() {
        for gy in 0..spec.rows {
            for gx in 0..spec.cols {
                let target = f64::from(positive[(a * spec.rows + gy) * spec.cols + gx]);
                let i = raw.index(a, 4, gy, gx);
                let (l, d) = bce(raw.data[i] as f64, target);
                loss += w.objectness * l;
                grad[i] += w.objectness * d;
            }
        }
    }
    (loss * norm, grad.into_iter().map(|d| (d * norm) as f32).collect())
}

pub const CHECKPOINT_KIND: &str = "detector";

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: Params,
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::new(seed, Stream::Weights);
        let mut cin = 3;
        let mut layers = Vec::new();
        for (i, ((&cout, &k), &s)) in cfg.channels.iter().zip(&cfg.kernels).zip(&cfg.strides).enumerate() {
            layers.push(Conv2d::new(&mut params, &format!("det.conv{i}"), cin, cout, k, s, k / 2, &mut rng));
            cin = cout;
        }
        let out = cfg.anchors.len() * CHANNELS_PER_ANCHOR;
        let head = Conv2d::new(&mut params, "det.head", cin, out, 1, 1, 0, &mut rng);
        let bias = params.get_mut(head.bias).data_mut();
        for a in 0..cfg.anchors.len() {
            bias[a * CHANNELS_PER_ANCHOR + 4] = -4.0;
        }
        Ok(Self {
            cfg,
            params,
            layers,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, params: &Params, x: handcue_tensor::Var) -> Result<handcue_tensor::Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward_relu(g, params, h)?;
        }
        Ok(self.head.forward(g, params, h)?)
    }

    fn split_grids(&self, out: &Tensor) -> Result<Vec<RawGrid>> {
        let spec = self.cfg.grid();
        let per = spec.channels() * spec.rows * spec.cols;
        out.data()
            .chunks(per)
            .map(|c| RawGrid::new(spec.clone(), c.to_vec()))
            .collect()
    }

    /// Raw grids for planar u8 detector inputs.
    pub fn raw_grids(&self, inputs: &[&[u8]]) -> Result<Vec<RawGrid>> {
        let x = batch_tensor(inputs, self.cfg.input_size)?;
        let mut g = Graph::inference();
        let xv = g.input(x)?;
        let out = self.forward(&mut g, &self.params, xv)?;
        self.split_grids(g.value(out))
    }

    /// Decoded, suppressed detections in scene pixels.
    pub fn detect_input(&self, input: &[u8]) -> Result<Vec<DetectedObject>> {
        let raw = self.raw_grids(&[input])?.remove(0);
        Ok(nms(&decode(&raw, self.cfg.conf_thresh)?, self.cfg.nms_iou))
    }

    pub fn detect(&self, scene: &Image) -> Result<Vec<DetectedObject>> {
        self.detect_input(&detector_input(scene, &self.cfg)?)
    }

    fn chunk_loss(&self, params: &Params, chunk: &[&DetSample], norm: f64) -> Result<(f64, handcue_tensor::Gradients)> {
        let inputs: Vec<&[u8]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let x = batch_tensor(&inputs, self.cfg.input_size)?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let out = self.forward(&mut g, params, xv)?;
        let grids = self.split_grids(g.value(out))?;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(g.value(out).numel());
        for (raw, s) in grids.iter().zip(chunk) {
            let (l, d) = grid_loss(raw, &s.gts, &self.cfg.loss, norm);
            total += l;
            grad.extend(d);
        }
        let grad = Tensor::new(g.shape(out), grad)?;
        let loss = g.custom_loss(out, total, grad)?;
        Ok((total, g.backward(loss)?))
    }

    /// Trains in place; returns per-epoch mean loss.
    pub fn train(&mut self, data: &[DetSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let mut params = std::mem::take(&mut self.params);
        let this = &*self;
        let scene_size = this.cfg.scene_size as f64;
        let mut step = 0u64;
        let history = train::run(&mut params, data.len(), cfg, |p, idx| {
            let mut rng = Rng::derive(cfg.seed, Stream::Augment, step);
            step += 1;
            let turned: Vec<DetSample> = if this.cfg.rotate_augment {
                idx.iter().map(|&i| data[i].rotated(rng.below(4), scene_size)).collect()
            } else {
                Vec::new()
            };
            let batch: Vec<&DetSample> = if this.cfg.rotate_augment {
                turned.iter().collect()
            } else {
                idx.iter().map(|&i| &data[i]).collect()
            };
            let norm = 1.0 / batch.len() as f64;
            train::batch_gradients(&batch, cfg.chunk, |c| this.chunk_loss(p, c, norm))
        });
        self.params = params;
        history
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            seed,
            hyperparameters: serde_json::to_value(&self.cfg)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Invalid(format!("checkpoint kind {} is not {CHECKPOINT_KIND}", ckpt.kind)));
        }
        let cfg: DetectorConfig = serde_json::from_value(ckpt.hyperparameters.clone())?;
        let mut det = Self::new(cfg, ckpt.seed)?;
        let loaded = det.params.load_matching(&ckpt.params)?;
        if loaded != det.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint provides {loaded} of {} detector tensors",
                det.params.len()
            )));
        }
        Ok(det)
    }
}

/// VOC all-point interpolated average precision. `hits` are `(score, tp)`.
pub fn average_precision(mut hits: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &(_, hit)) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    pub map: f64,
    pub ap_hand: f64,
    pub ap_body: f64,
    /// Over true-positive hands, degrees.
    pub angle_median_deg: f64,
    /// Share of true-positive hands whose association lands closest to the
    /// owning body center within the residual gate.
    pub assoc_accuracy: f64,
}

/// Greedy VOC matching of one image: detections by descending score take
/// the highest-IoU ground truth of their class at or above `thresh`.
/// Returns, per detection, the matched ground-truth index.
pub fn match_detections(dets: &[DetectedObject], gts: &[GtObject], thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.cls == dets[i].cls)
            .map(|(j, g)| (j, iou(&dets[i].bbox, &g.bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, v)) = best {
            if v >= thresh && !used[j] {
                used[j] = true;
                out[i] = Some(j);
            }
        }
    }
    out
}

pub fn evaluate(dets: &[Vec<DetectedObject>], gts: &[Vec<GtObject>], iou_thresh: f64, max_residual_ratio: f64) -> DetMetrics {
    let mut hits = [Vec::new(), Vec::new()];
    let mut n_gt = [0usize; 2];
    let mut angle_err = Vec::new();
    let (mut assoc_ok, mut assoc_n) = (0usize, 0usize);
    for (d, g) in dets.iter().zip(gts) {
        for o in g {
            n_gt[o.cls.index()] += 1;
        }
        let m = match_detections(d, g, iou_thresh);
        let bodies: Vec<&GtObject> = g.iter().filter(|o| o.cls == Class::Body).collect();
        for (det, mj) in d.iter().zip(&m) {
            hits[det.cls.index()].push((det.score, mj.is_some()));
            let (Some(j), Class::Hand) = (mj, det.cls) else { continue };
            let gt = &g[*j];
            if let (Some(pa), Some(ga)) = (det.angle, gt.angle) {
                angle_err.push(pa.distance(ga).to_degrees());
            }
            if let (Some(pred), Some(owner)) = (det.predicted_body_center(), gt.body_center) {
                assoc_n += 1;
                let nearest = bodies.iter().min_by(|a, b| {
                    (a.bbox.center() - pred).norm().total_cmp(&(b.bbox.center() - pred).norm())
                });
                if let Some(b) = nearest {
                    let r = (b.bbox.center() - pred).norm();
                    if (b.bbox.center() - owner).norm() < 1e-9 && r <= max_residual_ratio * b.bbox.diagonal() {
                        assoc_ok += 1;
                    }
                }
            }
        }
    }
    let ap_hand = average_precision(std::mem::take(&mut hits[0]), n_gt[0]);
    let ap_body = average_precision(std::mem::take(&mut hits[1]), n_gt[1]);
    let present: Vec<f64> = [(ap_hand, n_gt[0]), (ap_body, n_gt[1])]
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(a, _)| *a)
        .collect();
    DetMetrics {
        map: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        ap_hand,
        ap_body,
        angle_median_deg: crate::eval::median(&angle_err).unwrap_or(f64::NAN),
        assoc_accuracy: if assoc_n == 0 { 0.0 } else { assoc_ok as f64 / assoc_n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            ([10.0, 12.0, 40.0, 50.0], [15.0, 10.0, 45.0, 42.0]),
            ([0.0, 0.0, 5.0, 5.0], [10.0, 12.0, 20.0, 30.0]),
            ([3.0, 4.0, 30.0, 35.0], [5.0, 6.0, 20.0, 25.0]),
        ];
        for (p, g) in cases {
            let (_, grad) = giou_loss(p, g);
            for k in 0..4 {
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[k] += h;
                b[k] -= h;
                let fd = (giou_loss(a, g).0 - giou_loss(b, g).0) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-6, "corner {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn identical_boxes_have_zero_loss() {
        let b = [1.0, 2.0, 11.0, 22.0];
        assert!(giou_loss(b, b).0.abs() < 1e-12);
    }

    #[test]
    fn ap_of_perfect_ranking_is_one() {
        assert_eq!(average_precision(vec![(0.9, true), (0.8, true), (0.1, false)], 2), 1.0);
        assert!((average_precision(vec![(0.9, false), (0.8, true)], 1) - 0.5).abs() < 1e-12);
    }
}
