use super::ensure;
use handcue::detect::filter_patient;
use handcue::geometry::*;
use handcue::hand::{HandLandmarks2D, MIDDLE_MCP, NUM_JOINTS, WRIST};
use handcue_tensor::{Rng, Stream};
use std::f64::consts::PI;

/// Hand at angle zero: wrist straight above the middle knuckle.
pub fn upright_hand(center: Point2) -> HandLandmarks2D {
    let mut pts = [center; NUM_JOINTS];
    for (j, p) in pts.iter_mut().enumerate() {
        *p = center + Point2::new((j % 5) as f64 - 2.0, -(j as f64) * 0.7);
    }
    pts[WRIST] = center + Point2::new(0.0, -10.0);
    pts[MIDDLE_MCP] = center + Point2::new(0.0, 4.0);
    HandLandmarks2D::visible(pts)
}

pub fn rotation_from(axis: Point3, angle: f64) -> Mat3 {
    axis_angle(axis.normalized(), angle)
}

/// Rotates random hands and recovers the angle; returns the worst error.
pub fn orientation_recovery(seed: u64, n: usize) -> Result<f64, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = Point2::new(rng.uniform(20.0, 430.0), rng.uniform(20.0, 430.0));
        let theta = rng.uniform(-PI, PI);
        let hand = upright_hand(c).map(|p| p.rotate_about(c, theta));
        let got = hand_orientation(&hand).map_err(|e| e.to_string())?;
        worst = worst.max(got.distance(Angle::new(theta)));
    }
    ensure(worst < 1e-6, || format!("orientation error {worst:e} rad"))?;
    Ok(worst)
}

pub fn random_calibration(rng: &mut Rng) -> CameraCalibration {
    let axis = Point3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.1, 1.0));
    CameraCalibration {
        fx: rng.uniform(100.0, 900.0),
        fy: rng.uniform(100.0, 900.0),
        cx: rng.uniform(0.0, 640.0),
        cy: rng.uniform(0.0, 480.0),
        rotation: rotation_from(axis, rng.uniform(-PI, PI)),
        translation: Point3::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)),
        depth_scale: 0.001,
    }
}

/// Scanner point -> pixel and depth -> scanner point over random
/// calibrations; returns the worst error in meters.
pub fn pixel_depth_round_trip(seed: u64, n: usize) -> Result<f64, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut worst = 0.0f64;
    for _ in 0..n {
        let calib = random_calibration(&mut rng);
        calib.validate().map_err(|e| e.to_string())?;
        let cam = Point3::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3.0));
        let scanner = calib.camera_to_scanner(cam);
        let (pix, depth) = calib.project(scanner);
        let back = pixel_depth_to_scanner(pix.x, pix.y, depth, &calib).map_err(|e| e.to_string())?;
        worst = worst.max((back - scanner).norm());
    }
    ensure(worst < 1e-9, || format!("round trip error {worst:e} m"))?;
    Ok(worst)
}

/// A body exactly 0.65 over the bed is a technician; any more is a patient.
pub fn iob_boundary() -> Result<(), String> {
    let bed = BBox::new(70.0, 0.0, 300.0, 448.0).unwrap();
    let body = BBox::new(35.0, 50.0, 135.0, 150.0).unwrap();
    ensure(iob(&body, &bed) == 0.65, || format!("iob {}", iob(&body, &bed)))?;
    ensure(filter_patient(&[body], &bed, 0.65).technicians == [0], || "0.65 counted as patient".into())?;
    let over = BBox::new(35.5, 50.0, 135.5, 150.0).unwrap();
    ensure(filter_patient(&[over], &bed, 0.65).patients == [0], || "0.655 counted as technician".into())
}
