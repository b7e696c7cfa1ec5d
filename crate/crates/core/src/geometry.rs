//! Boxes, angles, rotated crops and the pinhole camera to scanner transform.
//!
//! Image coordinates are y-down with pixel `(i, j)` centered at
//! `(j + 0.5, i + 0.5)`. Angles are positive clockwise on screen.

use crate::error::{Error, Result};
use crate::hand::{HandLandmarks2D, MIDDLE_MCP, WRIST};
use crate::image::Image;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Clockwise rotation on screen (y-down).
    pub fn rotate(self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }

    pub fn rotate_about(self, center: Point2, theta: f64) -> Self {
        center + (self - center).rotate(theta)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn normalized(self) -> Point3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn lerp(self, o: Point3, t: f64) -> Point3 {
        self + (o - self) * t
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_vec(m: &Mat3, p: Point3) -> Point3 {
    Point3::new(
        m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
        m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
        m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
    )
}

pub fn mat_t_vec(m: &Mat3, p: Point3) -> Point3 {
    Point3::new(
        m[0][0] * p.x + m[1][0] * p.y + m[2][0] * p.z,
        m[0][1] * p.x + m[1][1] * p.y + m[2][1] * p.z,
        m[0][2] * p.x + m[1][2] * p.y + m[2][2] * p.z,
    )
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation about `axis` (unit) by `angle` radians, right-handed.
pub fn axis_angle(axis: Point3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let Point3 { x, y, z } = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl BBox {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Result<Self> {
        if !(l.is_finite() && t.is_finite() && r.is_finite() && b.is_finite()) || l >= r || t >= b {
            return Err(Error::InvalidBox { l, t, r, b });
        }
        Ok(Self { l, t, r, b })
    }

    pub fn from_center(c: Point2, w: f64, h: f64) -> Result<Self> {
        Self::new(c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0)
    }

    /// Tight box around `points`, each side widened by `margin` pixels.
    pub fn enclosing(points: &[Point2], margin: f64) -> Result<Self> {
        let l = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let t = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let r = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let b = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        Self::new(l - margin, t - margin, r + margin, b + margin)
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }

    pub fn height(&self) -> f64 {
        self.b - self.t
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.l + self.r) / 2.0, (self.t + self.b) / 2.0)
    }

    pub fn intersection_area(&self, o: &BBox) -> f64 {
        let w = (self.r.min(o.r) - self.l.max(o.l)).max(0.0);
        let h = (self.b.min(o.b) - self.t.max(o.t)).max(0.0);
        w * h
    }

    pub fn scaled(&self, k: f64) -> BBox {
        BBox {
            l: self.l * k,
            t: self.t * k,
            r: self.r * k,
            b: self.b * k,
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.l && p.x <= self.r && p.y >= self.t && p.y <= self.b
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection over the body box: `area(body ∩ bed) / area(body)`.
pub fn iob(body: &BBox, bed: &BBox) -> f64 {
    (body.intersection_area(bed) / body.area()).clamp(0.0, 1.0)
}

/// Wraps any real angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Angle in radians, always normalized to `(-π, π]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub fn new(rad: f64) -> Self {
        Angle(normalize_angle(rad))
    }

    pub fn rad(self) -> f64 {
        self.0
    }

    pub fn from_sin_cos(s: f64, c: f64) -> Self {
        Angle::new(s.atan2(c))
    }

    /// Smallest absolute difference between two angles.
    pub fn distance(self, o: Angle) -> f64 {
        normalize_angle(self.0 - o.0).abs()
    }
}

impl Add for Angle {
    type Output = Angle;
    fn add(self, o: Angle) -> Angle {
        Angle::new(self.0 + o.0)
    }
}

/// Angle of `wrist - middle MCP` measured from image-up `(0, -1)`,
/// positive clockwise.
pub fn hand_orientation(lms: &HandLandmarks2D) -> Result<Angle> {
    if lms.confidence[WRIST] <= 0.0 || lms.confidence[MIDDLE_MCP] <= 0.0 {
        return Err(Error::DegenerateHand("wrist or middle MCP not visible".into()));
    }
    let v = lms.points[WRIST] - lms.points[MIDDLE_MCP];
    if v.norm() < 1e-12 {
        return Err(Error::DegenerateHand("wrist and middle MCP coincide".into()));
    }
    Ok(Angle::new(v.x.atan2(-v.y)))
}

/// Similarity map between a square crop and its source image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub center: Point2,
    /// Source pixels per crop pixel.
    pub scale: f64,
    pub angle: f64,
    pub out_size: usize,
}

impl CropTransform {
    pub fn for_box(bbox: &BBox, angle: Angle, out_size: usize, margin: f64) -> Self {
        let side = bbox.width().max(bbox.height()) * (1.0 + margin);
        Self {
            center: bbox.center(),
            scale: side / out_size as f64,
            angle: angle.rad(),
            out_size,
        }
    }

    pub fn source_side(&self) -> f64 {
        self.scale * self.out_size as f64
    }

    fn out_center(&self) -> Point2 {
        let h = self.out_size as f64 / 2.0;
        Point2::new(h, h)
    }

    pub fn to_source(&self, p: Point2) -> Point2 {
        self.center + ((p - self.out_center()) * self.scale).rotate(self.angle)
    }

    pub fn to_crop(&self, p: Point2) -> Point2 {
        self.out_center() + (p - self.center).rotate(-self.angle) * (1.0 / self.scale)
    }
}

/// Crop `bbox` (enlarged by `margin` of its longer side) rotated by
/// `-angle`, so a hand at `angle` appears canonical.
pub fn rotated_crop(
    img: &Image,
    bbox: &BBox,
    angle: Angle,
    out_size: usize,
    margin: f64,
) -> Result<(Image, CropTransform)> {
    let bounds = BBox::new(0.0, 0.0, img.width as f64, img.height as f64)?;
    if bbox.intersection_area(&bounds) <= 0.0 {
        return Err(Error::EmptyIntersection);
    }
    let tf = CropTransform::for_box(bbox, angle, out_size, margin);
    Ok((warp(img, &tf), tf))
}

pub fn warp(img: &Image, tf: &CropTransform) -> Image {
    let n = tf.out_size;
    let mut out = Image::zeros(n, n, img.channels);
    let (s, c) = tf.angle.sin_cos();
    let h = n as f64 / 2.0;
    for i in 0..n {
        for j in 0..n {
            let ox = (j as f64 + 0.5 - h) * tf.scale;
            let oy = (i as f64 + 0.5 - h) * tf.scale;
            let sx = tf.center.x + ox * c - oy * s;
            let sy = tf.center.y + ox * s + oy * c;
            for ch in 0..img.channels {
                out.set(ch, i, j, img.bilinear(ch, sx, sy));
            }
        }
    }
    out
}

/// Pinhole intrinsics plus the rigid camera to scanner transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Point3,
    pub depth_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    intrinsics: Intrinsics,
    extrinsics: Extrinsics,
    depth_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
struct Extrinsics {
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

impl Default for CameraCalibration {
    /// Ceiling camera 2.2 m above the scanner origin looking straight down;
    /// image x maps to scanner x, image y to scanner z.
    fn default() -> Self {
        Self {
            fx: 380.0,
            fy: 380.0,
            cx: 224.0,
            cy: 224.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            translation: Point3::new(0.0, 2.2, 0.0),
            depth_scale: 0.001,
        }
    }
}

impl CameraCalibration {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Calibration(format!("rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})")));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Calibration(format!("rotation determinant {det} != 1")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::Calibration("depth_scale must be positive".into()));
        }
        if ![self.cx, self.cy].iter().all(|v| v.is_finite()) || !self.translation.is_finite() {
            return Err(Error::Calibration("non-finite value".into()));
        }
        Ok(())
    }

    pub fn camera_to_scanner(&self, p: Point3) -> Point3 {
        mat_vec(&self.rotation, p) + self.translation
    }

    pub fn scanner_to_camera(&self, p: Point3) -> Point3 {
        mat_t_vec(&self.rotation, p - self.translation)
    }

    /// Camera-frame point to pixel coordinates.
    pub fn project_camera(&self, p: Point3) -> Point2 {
        Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Scanner-frame point to `(pixel, depth in sensor units)`.
    pub fn project(&self, p: Point3) -> (Point2, f64) {
        let c = self.scanner_to_camera(p);
        (self.project_camera(c), c.z / self.depth_scale)
    }

    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        Point3::new(z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: CalibrationFile = toml::from_str(text).map_err(|e| Error::Calibration(e.to_string()))?;
        if f.extrinsics.rotation.len() != 9 || f.extrinsics.translation.len() != 3 {
            return Err(Error::Calibration("rotation needs 9 values and translation 3".into()));
        }
        let r = &f.extrinsics.rotation;
        let t = &f.extrinsics.translation;
        let calib = Self {
            fx: f.intrinsics.fx,
            fy: f.intrinsics.fy,
            cx: f.intrinsics.cx,
            cy: f.intrinsics.cy,
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: Point3::new(t[0], t[1], t[2]),
            depth_scale: f.depth_scale,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn to_toml_string(&self) -> String {
        let f = CalibrationFile {
            intrinsics: Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
            },
            extrinsics: Extrinsics {
                rotation: self.rotation.iter().flatten().copied().collect(),
                translation: self.translation.to_array().to_vec(),
            },
            depth_scale: self.depth_scale,
        };
        toml::to_string(&f).expect("calibration serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Pixel plus depth reading to a scanner-frame point.
pub fn pixel_depth_to_scanner(u: f64, v: f64, depth: f64, calib: &CameraCalibration) -> Result<Point3> {
    if !(depth.is_finite() && depth > 0.0) || !u.is_finite() || !v.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    let z = depth * calib.depth_scale;
    Ok(calib.camera_to_scanner(calib.backproject(u, v, z)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(Angle::new(PI).rad(), PI);
        assert_eq!(Angle::new(-PI).rad(), PI);
        assert!((Angle::new(3.0 * PI / 2.0).rad() + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_calibration_is_valid() {
        CameraCalibration::default().validate().unwrap();
        let text = CameraCalibration::default().to_toml_string();
        assert_eq!(CameraCalibration::from_toml_str(&text).unwrap(), CameraCalibration::default());
    }

    #[test]
    fn crop_transform_round_trip() {
        let b = BBox::new(10.0, 20.0, 50.0, 70.0).unwrap();
        let tf = CropTransform::for_box(&b, Angle::new(0.7), 48, 0.25);
        let p = Point2::new(31.0, 44.0);
        let q = tf.to_source(tf.to_crop(p));
        assert!((p - q).norm() < 1e-9);
    }
}
