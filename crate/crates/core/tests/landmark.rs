use handcue::geometry::{CameraCalibration, Point2};
use handcue::hand::{HandLandmarks2D, MIDDLE_MCP, NUM_JOINTS, WRIST};
use handcue::landmark::*;
use handcue::synth::{generate_scene, SceneConfig};
use handcue_tensor::{Checkpoint, Rng, Stream};

#[test]
fn heatmap_round_trip_is_within_a_quarter_stride() {
    let size = 12;
    let extent = (size * HEATMAP_STRIDE) as f64;
    let half = HEATMAP_STRIDE as f64 / 2.0;
    let mut rng = Rng::new(31, Stream::Custom(0));
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let pts: [Point2; NUM_JOINTS] =
            std::array::from_fn(|_| Point2::new(rng.uniform(half, extent - half), rng.uniform(half, extent - half)));
        let lms = HandLandmarks2D::visible(pts);
        let back = decode_heatmap(&encode_heatmap(&lms, size, 2.0));
        for (a, b) in back.points.iter().zip(&pts) {
            worst = worst.max((a.x - b.x).abs()).max((a.y - b.y).abs());
        }
        assert!(back.confidence.iter().all(|&c| c > 0.5));
    }
    assert!(worst <= HEATMAP_STRIDE as f64 / 4.0 + 1e-9, "worst axis error {worst}");
}

#[test]
fn empty_channels_decode_to_the_center_with_zero_confidence() {
    let back = decode_heatmap(&Heatmap::zeros(12));
    for j in 0..NUM_JOINTS {
        assert_eq!(back.confidence[j], 0.0);
        assert_eq!(back.points[j], Point2::new(24.0, 24.0));
    }
    assert!(Heatmap::new(12, vec![0.0; 5]).is_err());
}

#[test]
fn unjittered_crops_center_the_box_and_keep_landmarks_inside() {
    let cfg = CropConfig::default();
    let calib = CameraCalibration::default();
    let size = cfg.size as f64;
    for i in 0..20 {
        let s = generate_scene(&SceneConfig::default(), &calib, 41, i).unwrap();
        for h in 0..s.hands.len() {
            let c = HandCrop::from_scene(&s, h, &cfg, 0.0, None).unwrap();
            let hand = &s.hands[h];
            let mid = c.transform.to_crop(hand.bbox.center());
            assert!((mid - Point2::new(size / 2.0, size / 2.0)).norm() < 1e-9);
            for (p, q) in c.landmarks.points.iter().zip(&hand.landmarks.points) {
                assert!((0.0..=size).contains(&p.x) && (0.0..=size).contains(&p.y));
                assert!((c.transform.to_source(*p) - *q).norm() < 1e-9);
            }
            // Canonical orientation: knuckle-to-wrist points up the crop.
            let up = c.landmarks.points[WRIST] - c.landmarks.points[MIDDLE_MCP];
            assert!(up.y < 0.0 && up.x.abs() < 1e-6, "{up:?}");
            assert_eq!(c.pixels.len(), 3 * cfg.size * cfg.size);
            assert!(c.mask.iter().any(|&m| m));
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = LandmarkConfig::default();
    let net = LandmarkNet::new(cfg.clone(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lmk.ckpt");
    net.to_checkpoint(9).unwrap().save(&path).unwrap();
    let back = LandmarkNet::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let mut rng = Rng::new(1, Stream::Custom(0));
    let crop: Vec<u8> = (0..3 * cfg.crop.size * cfg.crop.size).map(|_| rng.below(256) as u8).collect();
    let (h0, _) = net.predict(&crop).unwrap();
    let (h1, _) = back.predict(&crop).unwrap();
    assert_eq!(h0, h1);
    assert_eq!(net.params.checksum(), back.params.checksum());

    let mut wrong = net.to_checkpoint(9).unwrap();
    wrong.kind = "detector".into();
    assert!(LandmarkNet::from_checkpoint(&wrong).is_err());
}

#[test]
fn bad_crop_sizes_are_rejected() {
    let cfg = LandmarkConfig {
        crop: CropConfig { size: 44, ..CropConfig::default() },
        ..LandmarkConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(LandmarkNet::new(cfg, 1).is_err());
    let net = LandmarkNet::new(LandmarkConfig::default(), 1).unwrap();
    assert!(net.predict(&[0u8; 10]).is_err());
}
