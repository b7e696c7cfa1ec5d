use handcue::dataset::*;
use handcue::geometry::{hand_orientation, CameraCalibration, Point3};
use handcue::hand::{INDEX_TIP, THUMB_TIP};
use handcue::synth::*;
use handcue_tensor::{Rng, Stream};
use std::fs;

fn small_scene() -> SceneConfig {
    SceneConfig::default()
}

#[test]
fn okay_parameter_controls_the_circle() {
    let mut rng = Rng::new(3, Stream::Custom(0));
    for _ in 0..500 {
        let base = HandParams {
            curls: [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)],
            okay: 1.0,
            rotation: rng.uniform(-3.0, 3.0),
            tilt: (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
            scale: rng.uniform(0.9, 1.1),
            wrist: Point3::new(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.4, 1.8)),
        };
        let closed = synthesize_hand(&base);
        assert!(closed.tip_distance() < 0.005 * base.scale.max(1.0));
        let open = synthesize_hand(&HandParams { okay: 0.0, ..base.clone() });
        assert!(open.tip_distance() > 0.05);
        assert_eq!(synthesize_hand(&base), closed);
    }
}

#[test]
fn labels_are_consistent_with_the_calibration() {
    let cfg = small_scene();
    let calib = CameraCalibration::default();
    for i in 0..50 {
        let s = generate_scene(&cfg, &calib, 17, i).unwrap();
        assert!(!s.hands.is_empty());
        for h in &s.hands {
            assert!(h.owner < s.bodies.len());
            for (p, j) in h.landmarks.points.iter().zip(&h.model.joints) {
                assert!((*p - calib.project_camera(*j)).norm() < 1e-6);
            }
            let angle = hand_orientation(&h.landmarks).unwrap();
            assert!(angle.distance(h.angle) < 1e-9);
            for p in &h.landmarks.points {
                assert!(h.bbox.contains(*p));
            }
            let o = (h.model.joints[THUMB_TIP] + h.model.joints[INDEX_TIP]) * 0.5;
            assert!((h.o_center_camera() - o).norm() < 1e-12);
            assert_eq!(h.okay, h.model.is_okay());
        }
        assert_eq!(s.image.width, cfg.width);
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let cfg = small_scene();
    let calib = CameraCalibration::default();
    let a = generate_scene(&cfg, &calib, 5, 3).unwrap();
    let b = generate_scene(&cfg, &calib, 5, 3).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.hands, b.hands);
    let c = generate_scene(&cfg, &calib, 6, 3).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn hand_boxes_are_around_forty_pixels_and_classes_balance() {
    let cfg = small_scene();
    let calib = CameraCalibration::default();
    let mut sides = Vec::new();
    let (mut okay, mut total) = (0usize, 0usize);
    for i in 0..1000 {
        let s = generate_scene(&cfg, &calib, 23, i).unwrap();
        for h in s.technician_hands() {
            sides.push(h.bbox.width().max(h.bbox.height()));
            total += 1;
            okay += usize::from(h.okay);
        }
    }
    let med = handcue::eval::median(&sides).unwrap();
    assert!((30.0..=50.0).contains(&med), "median side {med}");
    let frac = okay as f64 / total as f64;
    assert!((frac - cfg.p_okay).abs() < 0.05, "okay fraction {frac}");
}

#[test]
fn upright_hand_has_zero_angle() {
    let cfg = SceneConfig {
        technicians: (1, 1),
        hands_per_technician: (1, 1),
        patient_hands: (0, 0),
        ..SceneConfig::default()
    };
    let calib = CameraCalibration::default();
    let mut spec = sample_layout(&cfg, &calib, &mut Rng::derive(1, Stream::Scene, 0)).unwrap();
    let p = &mut spec.hands[0].0;
    p.rotation = 0.0;
    p.tilt = (0.0, 0.0);
    p.wrist = Point3::new(-0.25, 0.0, 1.6);
    let s = render_scene(&spec, &calib, &cfg).unwrap();
    assert!(s.hands[0].angle.rad().abs() < 1e-6, "{:?}", s.hands[0].angle);
}

#[test]
fn datasets_are_byte_identical_for_equal_seeds() {
    let cfg = small_scene();
    let calib = CameraCalibration::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let splits = [("train", 7), ("test", 5)];
    write_dataset(a.path(), &cfg, &calib, 11, &splits).unwrap();
    write_dataset(b.path(), &cfg, &calib, 11, &splits).unwrap();
    for rel in [
        MANIFEST.to_string(),
        format!("train/{IMAGES}"),
        format!("train/{DEPTH}"),
        format!("train/{LABELS}"),
        format!("test/{LABELS}"),
    ] {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
    }
    let m = Manifest::load(a.path()).unwrap();
    assert_eq!(m.split("train").unwrap().count, 7);
    assert_ne!(m.split("train").unwrap().seed, m.split("test").unwrap().seed);
    assert_eq!(m.calibration().unwrap(), calib);

    let (frames, labels) = read_split(a.path(), "test").unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(labels.len(), 5);
    // Frames reproduce the scenes they came from.
    let sseed = m.split("test").unwrap().seed;
    for (i, f) in frames.iter().enumerate() {
        let s = generate_scene(&cfg, &calib, sseed, i as u64).unwrap();
        let direct = handcue::pipeline::Frame::from_scene(&s, 0, 0);
        assert_eq!(f.rgb, direct.rgb);
        assert_eq!(f.depth, direct.depth);
        assert_eq!(labels[i], SceneLabels::from_scene(i as u64, &s));
    }
}

#[test]
fn corrupt_tensors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_scene(), &CameraCalibration::default(), 1, &[("x", 2)]).unwrap();
    let path = dir.path().join("x").join(IMAGES);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&path, bytes).unwrap();
    assert!(read_split(dir.path(), "x").is_err());
    assert!(read_split(dir.path(), "missing").is_err());
}
