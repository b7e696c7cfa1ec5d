mod oracles;

use handcue::geometry::*;
use handcue::hand::{HandLandmarks2D, NUM_JOINTS, WRIST};
use handcue::image::Image;
use oracles::geometry::{rotation_from, upright_hand};
use proptest::prelude::*;
use std::f64::consts::PI;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn orientation_is_recovered(theta in -PI + 1e-9..PI, cx in 50.0..400.0f64, cy in 50.0..400.0f64) {
        let c = Point2::new(cx, cy);
        let hand = upright_hand(c).map(|p| p.rotate_about(c, theta));
        let got = hand_orientation(&hand).unwrap();
        prop_assert!(got.distance(Angle::new(theta)) < 1e-6);
    }

    #[test]
    fn normalized_angles_stay_in_half_open_interval(a in -100.0..100.0f64) {
        let r = normalize_angle(a);
        prop_assert!(r > -PI && r <= PI);
        prop_assert!(((a - r) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - r) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
    }

    #[test]
    fn pixel_depth_round_trip(
        fx in 100.0..900.0f64, fy in 100.0..900.0f64,
        cx in 0.0..640.0f64, cy in 0.0..480.0f64,
        ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in 0.1..1.0f64, ang in -PI..PI,
        tx in -3.0..3.0f64, ty in -3.0..3.0f64, tz in -3.0..3.0f64,
        px in -0.5..0.5f64, py in -0.5..0.5f64, pz in 0.5..3.0f64,
    ) {
        let calib = CameraCalibration {
            fx, fy, cx, cy,
            rotation: rotation_from(Point3::new(ax, ay, az), ang),
            translation: Point3::new(tx, ty, tz),
            depth_scale: 0.001,
        };
        prop_assert!(calib.validate().is_ok());
        let scanner = calib.camera_to_scanner(Point3::new(px, py, pz));
        let (pix, depth) = calib.project(scanner);
        let back = pixel_depth_to_scanner(pix.x, pix.y, depth, &calib).unwrap();
        prop_assert!((back - scanner).norm() < 1e-9, "error {}", (back - scanner).norm());
    }

    #[test]
    fn crop_transform_inverts(bx in 10.0..300.0f64, by in 10.0..300.0f64, w in 5.0..80.0f64, h in 5.0..80.0f64, theta in -PI..PI, u in 0.0..48.0f64, v in 0.0..48.0f64) {
        let bbox = BBox::new(bx, by, bx + w, by + h).unwrap();
        let tf = CropTransform::for_box(&bbox, Angle::new(theta), 48, 0.25);
        let p = Point2::new(u, v);
        prop_assert!((tf.to_crop(tf.to_source(p)) - p).norm() < 1e-9);
    }
}

#[test]
fn seeded_orientation_and_round_trip_sweeps() {
    oracles::geometry::orientation_recovery(1, 10_000).unwrap();
    oracles::geometry::pixel_depth_round_trip(2, 10_000).unwrap();
}

#[test]
fn iob_rule_is_strict_at_the_threshold() {
    oracles::geometry::iob_boundary().unwrap();
}

#[test]
fn iou_and_iob_edge_cases() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let far = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &far), 0.0);
    assert_eq!(iob(&a, &far), 0.0);
    let inside = BBox::new(2.0, 2.0, 4.0, 4.0).unwrap();
    assert_eq!(iob(&inside, &a), 1.0);
    assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
    assert!(BBox::new(f64::NAN, 0.0, 1.0, 5.0).is_err());
}

#[test]
fn orientation_of_degenerate_hands_errors() {
    let c = Point2::new(10.0, 10.0);
    let mut pts = [c; NUM_JOINTS];
    pts[3] = Point2::new(12.0, 3.0);
    assert!(hand_orientation(&HandLandmarks2D::visible(pts)).is_err());
    let mut hidden = upright_hand(c);
    hidden.confidence[WRIST] = 0.0;
    assert!(hand_orientation(&hidden).is_err());
}

#[test]
fn invalid_depth_is_rejected() {
    let calib = CameraCalibration::default();
    for d in [0.0, -5.0, f64::NAN, f64::INFINITY] {
        assert!(pixel_depth_to_scanner(100.0, 100.0, d, &calib).is_err());
    }
}

#[test]
fn calibration_file_round_trips_and_rejects_bad_rotations() {
    let calib = CameraCalibration::default();
    let text = calib.to_toml_string();
    assert_eq!(CameraCalibration::from_toml_str(&text).unwrap(), calib);
    let bad = text.replace("depth_scale = 0.001", "depth_scale = 0.0");
    assert!(CameraCalibration::from_toml_str(&bad).is_err());
    let mut skew = calib.clone();
    skew.rotation[0][1] = 0.1;
    assert!(skew.validate().is_err());
    let mut mirror = calib;
    mirror.rotation[0][0] = -1.0;
    assert!(mirror.validate().is_err());
}

#[test]
fn rotated_crop_samples_the_rotated_source() {
    // A bright pixel block to the right of the box center moves to the
    // top of a crop rotated by +90 degrees.
    let mut img = Image::zeros(64, 64, 1);
    for y in 30..34 {
        for x in 44..48 {
            img.set(0, y, x, 1.0);
        }
    }
    let bbox = BBox::new(16.0, 16.0, 48.0, 48.0).unwrap();
    let (crop, tf) = rotated_crop(&img, &bbox, Angle::new(PI / 2.0), 32, 0.0).unwrap();
    let spot = tf.to_crop(Point2::new(46.0, 32.0));
    assert!((spot.x - 16.0).abs() < 1e-9 && spot.y < 4.0, "{spot:?}");
    assert!(crop.get(0, spot.y as usize, spot.x as usize) > 0.5);
    let outside = BBox::new(100.0, 100.0, 120.0, 120.0).unwrap();
    assert!(rotated_crop(&img, &outside, Angle::new(0.0), 32, 0.0).is_err());
}
