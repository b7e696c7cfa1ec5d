//! Procedural scenes: a ceiling camera looking at a patient table with
//! technicians around it. Hands are articulated 21-joint skeletons drawn as
//! shaded capsules; bodies and the bed are textured rectangles.

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, hand_orientation, iob, iou, mat_mul, mat_vec, Angle, BBox, CameraCalibration, Point2, Point3,
};
use crate::hand::{HandLandmarks2D, BONES, INDEX_TIP, NUM_JOINTS, THUMB_TIP};
use crate::image::{DepthMap, Image};
use handcue_tensor::{Rng, Stream};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const GENERATOR_VERSION: &str = "handcue-synth/1";
pub const OKAY_LABEL_THRESHOLD: f64 = 0.8;

/// MCP offset from the wrist, splay from +y (radians, toward +x) and
/// phalanx lengths for index, middle, ring and pinky, in meters.
const FINGERS: [(Point3, f64, [f64; 3]); 4] = [
    (Point3::new(0.024, 0.090, 0.0), 0.09, [0.040, 0.025, 0.020]),
    (Point3::new(0.000, 0.095, 0.0), 0.0, [0.045, 0.028, 0.022]),
    (Point3::new(-0.021, 0.090, 0.0), -0.09, [0.042, 0.026, 0.020]),
    (Point3::new(-0.039, 0.080, 0.0), -0.21, [0.032, 0.020, 0.018]),
];
const THUMB_CMC: Point3 = Point3::new(0.020, 0.025, 0.0);
const THUMB_PROXIMAL: f64 = 0.045;
const THUMB_DISTAL: f64 = 0.055;
const THUMB_OPEN_REACH: f64 = 0.085;
const OKAY_INDEX_CURL: f64 = 0.7;
/// Flexion per unit curl at MCP, PIP and DIP joints.
const FLEX: [f64; 3] = [70.0 * PI / 180.0, 100.0 * PI / 180.0, 70.0 * PI / 180.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    /// Curl in `[0, 1]` for index, middle, ring and pinky.
    pub curls: [f64; 4],
    /// Thumb-index circle closure in `[0, 1]`.
    pub okay: f64,
    /// In-plane rotation, clockwise on screen.
    pub rotation: f64,
    /// Out-of-plane tilt about the hand's x and y axes.
    pub tilt: (f64, f64),
    pub scale: f64,
    /// Wrist position in the camera frame, meters.
    pub wrist: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub params: HandParams,
    /// Canonical skeleton (hand frame, scaled, articulated).
    pub local: [Point3; NUM_JOINTS],
    /// Joints in the camera frame.
    pub joints: [Point3; NUM_JOINTS],
}

impl HandModel {
    pub fn is_okay(&self) -> bool {
        self.params.okay >= OKAY_LABEL_THRESHOLD
    }

    /// Midpoint of thumb and index tips in the camera frame.
    pub fn o_center_camera(&self) -> Point3 {
        (self.joints[THUMB_TIP] + self.joints[INDEX_TIP]) * 0.5
    }

    pub fn tip_distance(&self) -> f64 {
        (self.joints[THUMB_TIP] - self.joints[INDEX_TIP]).norm()
    }

    /// Rotation taking the hand frame to the camera frame.
    pub fn orientation(&self) -> [[f64; 3]; 3] {
        let p = &self.params;
        let tilt = mat_mul(
            &axis_angle(Point3::new(1.0, 0.0, 0.0), p.tilt.0),
            &axis_angle(Point3::new(0.0, 1.0, 0.0), p.tilt.1),
        );
        mat_mul(&axis_angle(Point3::new(0.0, 0.0, 1.0), p.rotation), &tilt)
    }
}

fn finger_chain(base: Point3, splay: f64, lengths: [f64; 3], curl: f64) -> [Point3; 4] {
    let dir = Point3::new(splay.sin(), splay.cos(), 0.0);
    let toward = Point3::new(0.0, 0.0, -1.0);
    let mut out = [base; 4];
    let mut phi = 0.0;
    for k in 0..3 {
        phi += FLEX[k] * curl;
        let d = dir * phi.cos() + toward * phi.sin();
        out[k + 1] = out[k] + d * lengths[k];
    }
    out
}

/// Two-link inverse kinematics: middle joint and (possibly clamped) end
/// point reaching from `base` toward `target`, bending toward `pole`.
fn two_link(base: Point3, target: Point3, l1: f64, l2: f64, pole: Point3) -> (Point3, Point3) {
    let delta = target - base;
    let d = delta.norm().clamp((l1 - l2).abs() + 1e-9, l1 + l2 - 1e-9);
    let u = delta.normalized();
    let w = (pole - u * pole.dot(u)).normalized();
    let a = (l1 * l1 - l2 * l2 + d * d) / (2.0 * d);
    let h = (l1 * l1 - a * a).max(0.0).sqrt();
    (base + u * a + w * h, base + u * d)
}

/// Articulated skeleton in the canonical hand frame: wrist at the origin,
/// fingers along +y, palm facing the camera (-z).
pub fn canonical_skeleton(curls: [f64; 4], okay: f64) -> [Point3; NUM_JOINTS] {
    let mut j = [Point3::default(); NUM_JOINTS];
    for (f, &(base, splay, lengths)) in FINGERS.iter().enumerate() {
        let curl = if f == 0 {
            curls[0] + (OKAY_INDEX_CURL - curls[0]) * okay
        } else {
            curls[f]
        };
        let chain = finger_chain(base, splay, lengths, curl);
        j[5 + 4 * f..9 + 4 * f].copy_from_slice(&chain);
    }
    let open_dir = Point3::new(50f64.to_radians().sin(), 50f64.to_radians().cos(), -0.12).normalized();
    let open_tip = THUMB_CMC + open_dir * THUMB_OPEN_REACH;
    let target = open_tip.lerp(j[INDEX_TIP], okay);
    let pole = Point3::new(1.0, 0.0, -0.5).normalized();
    let (mcp, tip) = two_link(THUMB_CMC, target, THUMB_PROXIMAL, THUMB_DISTAL, pole);
    let u = (tip - mcp).normalized();
    let bulge = (pole - u * pole.dot(u)).normalized();
    j[1] = THUMB_CMC;
    j[2] = mcp;
    j[3] = mcp + u * (0.55 * THUMB_DISTAL) + bulge * 0.003;
    j[4] = tip;
    j
}

pub fn synthesize_hand(params: &HandParams) -> HandModel {
    let local = canonical_skeleton(params.curls, params.okay).map(|p| p * params.scale);
    let mut model = HandModel {
        params: params.clone(),
        local,
        joints: local,
    };
    let rot = model.orientation();
    model.joints = local.map(|p| mat_vec(&rot, p) + params.wrist);
    model
}

/// Draw articulation for one hand; `okay` picks the gesture class.
pub fn sample_articulation(rng: &mut Rng, okay: bool) -> ([f64; 4], f64) {
    if okay {
        let curls = [
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 0.3),
            rng.uniform(0.0, 0.35),
            rng.uniform(0.0, 0.4),
        ];
        (curls, rng.uniform(0.9, 1.0))
    } else {
        let curls = [
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 1.0),
        ];
        (curls, rng.uniform(0.0, 0.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub bed: BBox,
    pub technicians: (usize, usize),
    pub hands_per_technician: (usize, usize),
    pub patient_hands: (usize, usize),
    pub p_okay: f64,
    /// Camera-frame depth range of technician hands, meters.
    pub hand_depth: (f64, f64),
    pub patient_hand_depth: f64,
    pub hand_scale: (f64, f64),
    pub tilt_deg: f64,
    pub box_margin: f64,
    pub depth_noise_mm: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 448,
            height: 448,
            bed: BBox {
                l: 150.0,
                t: 30.0,
                r: 298.0,
                b: 418.0,
            },
            technicians: (1, 2),
            hands_per_technician: (1, 2),
            patient_hands: (0, 2),
            p_okay: 0.5,
            hand_depth: (1.45, 1.75),
            patient_hand_depth: 1.82,
            hand_scale: (0.95, 1.05),
            tilt_deg: 15.0,
            box_margin: 3.0,
            depth_noise_mm: 0.0,
        }
    }
}

pub const BED_DEPTH_M: f64 = 1.90;
pub const FLOOR_DEPTH_M: f64 = 2.60;
pub const PATIENT_DEPTH_M: f64 = 1.78;
pub const TECHNICIAN_DEPTH_M: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyInstance {
    pub bbox: BBox,
    pub patient: bool,
}

/// Binary hand mask over a sub-rectangle of the scene.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Mask {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.w
            && y < self.y0 + self.h
            && self.bits[(y - self.y0) * self.w + (x - self.x0)]
    }

    pub fn to_image(&self, width: usize, height: usize) -> Image {
        let mut img = Image::zeros(width, height, 1);
        for y in self.y0..(self.y0 + self.h).min(height) {
            for x in self.x0..(self.x0 + self.w).min(width) {
                if self.get(x, y) {
                    img.set(0, y, x, 1.0);
                }
            }
        }
        img
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandInstance {
    pub model: HandModel,
    pub landmarks: HandLandmarks2D,
    pub bbox: BBox,
    pub angle: Angle,
    pub owner: usize,
    pub okay: bool,
    pub mask: Mask,
}

impl HandInstance {
    pub fn o_center_px(&self) -> Point2 {
        self.landmarks.o_center()
    }

    pub fn o_center_camera(&self) -> Point3 {
        self.model.o_center_camera()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub depth: DepthMap,
    pub hands: Vec<HandInstance>,
    pub bodies: Vec<BodyInstance>,
    pub bed: BBox,
    pub calib: CameraCalibration,
}

impl SceneSample {
    pub fn assoc(&self, hand: &HandInstance) -> Point2 {
        self.bodies[hand.owner].bbox.center() - hand.bbox.center()
    }

    pub fn technician_hands(&self) -> impl Iterator<Item = &HandInstance> {
        self.hands.iter().filter(|h| !self.bodies[h.owner].patient)
    }
}

/// Layout of one scene before rasterization.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub bodies: Vec<BodyInstance>,
    pub hands: Vec<(HandParams, usize)>,
    pub palette_seed: u64,
}

fn project_all(calib: &CameraCalibration, joints: &[Point3; NUM_JOINTS]) -> [Point2; NUM_JOINTS] {
    joints.map(|p| calib.project_camera(p))
}

fn hand_box(points: &[Point2], margin: f64) -> Result<BBox> {
    BBox::enclosing(points, margin)
}

/// Sample a layout; hands that cannot be placed are retried, and the
/// whole attempt fails only if the layout cannot be satisfied at all.
pub fn sample_layout(cfg: &SceneConfig, calib: &CameraCalibration, rng: &mut Rng) -> Result<SceneSpec> {
    let bed = cfg.bed;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut bodies = Vec::new();
    let pw = rng.uniform(95.0, 125.0).min(bed.width() - 6.0);
    let ph = rng.uniform(220.0, 300.0).min(bed.height() - 6.0);
    let pc = Point2::new(
        rng.uniform(bed.l + pw / 2.0 + 2.0, bed.r - pw / 2.0 - 2.0),
        rng.uniform(bed.t + ph / 2.0 + 2.0, bed.b - ph / 2.0 - 2.0),
    );
    bodies.push(BodyInstance {
        bbox: BBox::from_center(pc, pw, ph)?,
        patient: true,
    });
    let n_tech = cfg.technicians.0 + rng.below(cfg.technicians.1 - cfg.technicians.0 + 1);
    let mut tries = 0;
    while bodies.len() < 1 + n_tech {
        tries += 1;
        if tries > 200 {
            return Err(Error::Invalid("cannot place technicians".into()));
        }
        let bw = rng.uniform(70.0, 100.0);
        let bh = rng.uniform(80.0, 120.0);
        let left = rng.chance(0.5);
        let cx = if left {
            rng.uniform(bw / 2.0 + 4.0, bed.l + 5.0)
        } else {
            rng.uniform(bed.r - 5.0, w - bw / 2.0 - 4.0)
        };
        let cy = rng.uniform(bh / 2.0 + 4.0, h - bh / 2.0 - 4.0);
        let bb = BBox::from_center(Point2::new(cx, cy), bw, bh)?;
        if iob(&bb, &bed) > 0.3 || bodies.iter().any(|b: &BodyInstance| iou(&b.bbox, &bb) > 0.0) {
            continue;
        }
        bodies.push(BodyInstance {
            bbox: bb,
            patient: false,
        });
    }

    let mut hands: Vec<(HandParams, usize)> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    let bounds = BBox::new(2.0, 2.0, w - 2.0, h - 2.0)?;
    for (bi, body) in bodies.iter().enumerate() {
        let n = if body.patient {
            cfg.patient_hands.0 + rng.below(cfg.patient_hands.1 - cfg.patient_hands.0 + 1)
        } else {
            cfg.hands_per_technician.0 + rng.below(cfg.hands_per_technician.1 - cfg.hands_per_technician.0 + 1)
        };
        let mut placed = 0;
        let mut attempts = 0;
        while placed < n && attempts < 100 {
            attempts += 1;
            let okay = rng.chance(cfg.p_okay);
            let (curls, okay_param) = sample_articulation(rng, okay);
            let c = body.bbox.center();
            let (z, center) = if body.patient {
                let cx = rng.uniform(body.bbox.l - 10.0, body.bbox.r + 10.0);
                let cy = rng.uniform(body.bbox.t + 20.0, body.bbox.b - 20.0);
                (cfg.patient_hand_depth, Point2::new(cx, cy))
            } else {
                let phi = rng.uniform(-PI, PI);
                let rho = rng.uniform(-10.0, 40.0);
                let p = c + Point2::new(
                    phi.cos() * (body.bbox.width() / 2.0 + rho),
                    phi.sin() * (body.bbox.height() / 2.0 + rho),
                );
                (rng.uniform(cfg.hand_depth.0, cfg.hand_depth.1), p)
            };
            let toward = c - center;
            let rotation = if body.patient {
                rng.uniform(-PI, PI)
            } else {
                toward.x.atan2(-toward.y) + rng.uniform(-0.6, 0.6)
            };
            let scale = rng.uniform(cfg.hand_scale.0, cfg.hand_scale.1);
            let tilt = (
                rng.uniform(-cfg.tilt_deg, cfg.tilt_deg).to_radians(),
                rng.uniform(-cfg.tilt_deg, cfg.tilt_deg).to_radians(),
            );
            // Wrist sits ~8 cm from the hand center, opposite the fingers.
            let back = Point2::new(rotation.sin(), -rotation.cos()) * (0.08 * scale * calib.fx / z);
            let wrist_px = center + back;
            let wrist = calib.backproject(wrist_px.x, wrist_px.y, z);
            let params = HandParams {
                curls,
                okay: okay_param,
                rotation,
                tilt,
                scale,
                wrist,
            };
            let model = synthesize_hand(&params);
            let pts = project_all(calib, &model.joints);
            let bb = hand_box(&pts, cfg.box_margin)?;
            let inside = bb.l >= bounds.l && bb.t >= bounds.t && bb.r <= bounds.r && bb.b <= bounds.b;
            if !inside || boxes.iter().any(|o| iou(o, &bb) > 0.05) {
                continue;
            }
            boxes.push(bb);
            hands.push((params, bi));
            placed += 1;
        }
    }
    Ok(SceneSpec {
        bodies,
        hands,
        palette_seed: rng.next_u64(),
    })
}

struct Canvas {
    image: Image,
    depth: DepthMap,
    zbuf: Vec<f64>,
    owner: Vec<i32>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], cov: f32) {
        for (c, &v) in color.iter().enumerate() {
            let old = self.image.get(c, y, x);
            self.image.set(c, y, x, cov * v + (1.0 - cov) * old);
        }
    }

    fn fill_rect(&mut self, bb: &BBox, depth_m: f64, rng: &mut Rng, base: [f32; 3]) {
        let stripe = rng.uniform(6.0, 18.0);
        let phase = rng.uniform(0.0, 2.0 * PI);
        let horizontal = rng.chance(0.5);
        let (x0, x1) = (bb.l.round().max(0.0) as usize, (bb.r.round() as usize).min(self.image.width));
        let (y0, y1) = (bb.t.round().max(0.0) as usize, (bb.b.round() as usize).min(self.image.height));
        for y in y0..y1 {
            for x in x0..x1 {
                let s = if horizontal { y as f64 } else { x as f64 };
                let tex = 1.0 + 0.06 * ((s / stripe * 2.0 * PI + phase).sin()) as f32;
                let color = base.map(|c| (c * tex).clamp(0.0, 1.0));
                self.blend(x, y, color, 1.0);
                self.depth.set(x, y, (depth_m * 1000.0) as f32);
                self.zbuf[y * self.image.width + x] = f64::INFINITY;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn capsule(&mut self, a: Point2, b: Point2, za: f64, zb: f64, radius: f64, color: [f32; 3], id: i32, z_ref: f64) {
        let (w, h) = (self.image.width as i64, self.image.height as i64);
        let x0 = ((a.x.min(b.x) - radius - 1.0).floor() as i64).max(0);
        let x1 = ((a.x.max(b.x) + radius + 1.0).ceil() as i64).min(w - 1);
        let y0 = ((a.y.min(b.y) - radius - 1.0).floor() as i64).max(0);
        let y1 = ((a.y.max(b.y) + radius + 1.0).ceil() as i64).min(h - 1);
        let ab = b - a;
        let len2 = (ab.x * ab.x + ab.y * ab.y).max(1e-12);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let ap = p - a;
                let t = ((ap.x * ab.x + ap.y * ab.y) / len2).clamp(0.0, 1.0);
                let dist = (p - (a + ab * t)).norm();
                let cov = (radius + 0.5 - dist).clamp(0.0, 1.0) as f32;
                if cov <= 0.0 {
                    continue;
                }
                let z = za + (zb - za) * t;
                let i = (y as usize) * self.image.width + x as usize;
                if z >= self.zbuf[i] {
                    continue;
                }
                let bulge = (1.0 - (dist / radius.max(1e-6)).min(1.0).powi(2)).sqrt();
                let light = ((0.72 + 0.28 * bulge) * (1.0 + 3.0 * (z_ref - z))).clamp(0.4, 1.3) as f32;
                let shaded = color.map(|c| (c * light).clamp(0.0, 1.0));
                self.blend(x as usize, y as usize, shaded, cov);
                if cov >= 0.5 {
                    self.zbuf[i] = z;
                    self.depth.set(x as usize, y as usize, (z * 1000.0) as f32);
                    self.owner[i] = id;
                }
            }
        }
    }

    fn polygon(&mut self, pts: &[Point2], zs: &[f64], color: [f32; 3], id: i32, z_ref: f64) {
        let (w, h) = (self.image.width as i64, self.image.height as i64);
        let x0 = (pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor() as i64).max(0);
        let x1 = (pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil() as i64).min(w - 1);
        let y0 = (pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor() as i64).max(0);
        let y1 = (pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil() as i64).min(h - 1);
        let z = zs.iter().sum::<f64>() / zs.len() as f64;
        let light = ((0.85) * (1.0 + 3.0 * (z_ref - z))).clamp(0.4, 1.3) as f32;
        let shaded = color.map(|c| (c * light).clamp(0.0, 1.0));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (pi, pj) = (pts[i], pts[j]);
                    if (pi.y > p.y) != (pj.y > p.y) && p.x < (pj.x - pi.x) * (p.y - pi.y) / (pj.y - pi.y) + pi.x {
                        inside = !inside;
                    }
                    j = i;
                }
                let idx = (y as usize) * self.image.width + x as usize;
                if inside && z < self.zbuf[idx] {
                    self.blend(x as usize, y as usize, shaded, 1.0);
                    self.zbuf[idx] = z;
                    self.depth.set(x as usize, y as usize, (z * 1000.0) as f32);
                    self.owner[idx] = id;
                }
            }
        }
    }
}

fn skin(rng: &mut Rng) -> [f32; 3] {
    let t = rng.uniform_f32(0.0, 1.0);
    let light = [0.93, 0.76, 0.64];
    let dark = [0.50, 0.34, 0.24];
    [0, 1, 2].map(|c| light[c] + (dark[c] - light[c]) * t)
}

fn clothing(rng: &mut Rng) -> [f32; 3] {
    let palette = [
        [0.30, 0.55, 0.60],
        [0.25, 0.35, 0.60],
        [0.55, 0.65, 0.75],
        [0.40, 0.60, 0.40],
        [0.70, 0.70, 0.75],
        [0.50, 0.30, 0.45],
    ];
    let base = palette[rng.below(palette.len())];
    base.map(|c| (c + rng.uniform_f32(-0.06, 0.06)).clamp(0.0, 1.0))
}

/// Rasterize a layout. Pure function of `(spec, calib, cfg)`.
pub fn render_scene(spec: &SceneSpec, calib: &CameraCalibration, cfg: &SceneConfig) -> Result<SceneSample> {
    let mut rng = Rng::derive(spec.palette_seed, Stream::Scene, 0);
    let (w, h) = (cfg.width, cfg.height);
    let floor = [0.62, 0.60, 0.55].map(|c: f32| c + rng.uniform_f32(-0.08, 0.08));
    let mut canvas = Canvas {
        image: Image::filled(w, h, &floor),
        depth: DepthMap::filled(w, h, (FLOOR_DEPTH_M * 1000.0) as f32),
        zbuf: vec![f64::INFINITY; w * h],
        owner: vec![-1; w * h],
    };
    let (f1, f2, ph) = (rng.uniform(0.02, 0.06), rng.uniform(0.02, 0.06), rng.uniform(0.0, 6.0));
    for y in 0..h {
        for x in 0..w {
            let tex = 1.0 + 0.05 * (((x as f64) * f1 + ph).sin() * ((y as f64) * f2).cos()) as f32;
            for c in 0..3 {
                let v = canvas.image.get(c, y, x) * tex;
                canvas.image.set(c, y, x, v);
            }
        }
    }
    let bed_color = [0.80, 0.84, 0.88].map(|c: f32| c + rng.uniform_f32(-0.05, 0.05));
    canvas.fill_rect(&cfg.bed, BED_DEPTH_M, &mut rng, bed_color);
    let mut body_colors = Vec::new();
    for body in &spec.bodies {
        let depth = if body.patient { PATIENT_DEPTH_M } else { TECHNICIAN_DEPTH_M };
        let color = clothing(&mut rng);
        canvas.fill_rect(&body.bbox, depth, &mut rng, color);
        body_colors.push(color);
    }

    let mut hands = Vec::new();
    for (id, (params, owner)) in spec.hands.iter().enumerate() {
        let model = synthesize_hand(params);
        let pts = project_all(calib, &model.joints);
        let z_ref = model.joints[0].z;
        let color = skin(&mut rng);
        let sleeve = body_colors[*owner].map(|c| c * 0.9);
        let id = id as i32;
        let px_per_m = |z: f64| calib.fx / z;

        // Forearm leaving the wrist away from the fingers.
        let rot = model.orientation();
        let fore = model.joints[0] + mat_vec(&rot, Point3::new(0.0, -0.14, 0.05) * params.scale);
        let fore_px = calib.project_camera(fore);
        canvas.capsule(
            pts[0],
            fore_px,
            model.joints[0].z + 0.01,
            fore.z,
            0.024 * params.scale * px_per_m(z_ref),
            sleeve,
            -2,
            z_ref,
        );
        let palm_idx = [0usize, 1, 2, 5, 9, 13, 17];
        let palm: Vec<Point2> = palm_idx.iter().map(|&i| pts[i]).collect();
        let palm_z: Vec<f64> = palm_idx.iter().map(|&i| model.joints[i].z + 0.004).collect();
        canvas.polygon(&palm, &palm_z, color, id, z_ref);
        for &(a, b) in &BONES {
            let (za, zb) = (model.joints[a].z, model.joints[b].z);
            let thumb = b <= 4;
            let r_m = if a == 0 { 0.011 } else if thumb { 0.0095 } else { 0.0085 } * params.scale;
            canvas.capsule(pts[a], pts[b], za, zb, r_m * px_per_m((za + zb) / 2.0), color, id, z_ref);
        }
        let landmarks = HandLandmarks2D::visible(pts);
        let bbox = hand_box(&pts, cfg.box_margin)?;
        let angle = hand_orientation(&landmarks)?;
        hands.push(HandInstance {
            okay: model.is_okay(),
            model,
            landmarks,
            bbox,
            angle,
            owner: *owner,
            mask: Mask::default(),
        });
    }
    for (id, hand) in hands.iter_mut().enumerate() {
        let bb = hand.bbox;
        let x0 = bb.l.floor().max(0.0) as usize;
        let y0 = bb.t.floor().max(0.0) as usize;
        let x1 = (bb.r.ceil() as usize).min(w);
        let y1 = (bb.b.ceil() as usize).min(h);
        let mut bits = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                bits.push(canvas.owner[y * w + x] == id as i32);
            }
        }
        hand.mask = Mask {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
            bits,
        };
    }
    for v in &mut canvas.image.data {
        *v = v.clamp(0.0, 1.0);
    }
    if cfg.depth_noise_mm > 0.0 {
        let mut noise = Rng::derive(spec.palette_seed, Stream::Noise, 0);
        for d in &mut canvas.depth.data {
            *d += (noise.normal() * cfg.depth_noise_mm) as f32;
        }
    }
    Ok(SceneSample {
        image: canvas.image,
        depth: canvas.depth,
        hands,
        bodies: spec.bodies.clone(),
        bed: cfg.bed,
        calib: calib.clone(),
    })
}

/// Scene `index` of the stream identified by `seed`.
pub fn generate_scene(cfg: &SceneConfig, calib: &CameraCalibration, seed: u64, index: u64) -> Result<SceneSample> {
    let mut rng = Rng::derive(seed, Stream::Scene, index);
    let spec = sample_layout(cfg, calib, &mut rng)?;
    render_scene(&spec, calib, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bones_keep_length_under_articulation() {
        let a = canonical_skeleton([0.0; 4], 0.0);
        let b = canonical_skeleton([0.9, 0.4, 0.7, 1.0], 1.0);
        for &(p, c) in &BONES {
            let la = (a[c] - a[p]).norm();
            let lb = (b[c] - b[p]).norm();
            assert!((la - lb).abs() < 1e-9, "bone {p}-{c}: {la} vs {lb}");
        }
    }

    #[test]
    fn okay_closes_the_circle() {
        for curls in [[0.0; 4], [1.0; 4], [0.5, 0.2, 0.9, 0.1]] {
            let closed = canonical_skeleton(curls, 1.0);
            assert!((closed[THUMB_TIP] - closed[INDEX_TIP]).norm() < 0.005);
            let open = canonical_skeleton(curls, 0.0);
            assert!((open[THUMB_TIP] - open[INDEX_TIP]).norm() > 0.05);
        }
    }
}
