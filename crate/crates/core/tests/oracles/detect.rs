use super::ensure;
use handcue::detect::*;
use handcue::geometry::{iou, Angle, BBox, Point2};
use handcue_tensor::{Rng, Stream};

pub fn grid() -> GridSpec {
    GridSpec {
        rows: 14,
        cols: 14,
        stride: 16.0,
        scale: 2.0,
        anchors: vec![(10.0, 10.0), (24.0, 24.0), (60.0, 90.0)],
    }
}

pub fn random_object(rng: &mut Rng, hand_only: bool) -> DetectedObject {
    let c = Point2::new(rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0));
    let bbox = BBox::from_center(c, rng.uniform(4.0, 60.0), rng.uniform(4.0, 60.0)).unwrap();
    let cls = if hand_only || rng.chance(0.5) { Class::Hand } else { Class::Body };
    DetectedObject {
        bbox,
        cls,
        // Coarse scores so ties occur.
        score: (rng.uniform(0.25, 1.0) * 8.0).round() / 8.0,
        angle: (cls == Class::Hand).then(|| Angle::new(rng.uniform(-3.0, 3.0))),
        assoc: (cls == Class::Hand).then(|| Point2::new(rng.uniform(-80.0, 80.0), rng.uniform(-80.0, 80.0))),
    }
}

/// i precedes j when it scores higher, or equally and comes first.
fn precedes(objs: &[DetectedObject], i: usize, j: usize) -> bool {
    objs[i].score > objs[j].score || (objs[i].score == objs[j].score && i < j)
}

pub fn nms_oracle(objs: &[DetectedObject], thresh: f64) -> Vec<usize> {
    let n = objs.len();
    let mut rank: Vec<usize> = (0..n).collect();
    // Selection sort by precedence, independent of the library's ordering.
    for a in 0..n {
        for b in a + 1..n {
            if precedes(objs, rank[b], rank[a]) {
                rank.swap(a, b);
            }
        }
    }
    let mut kept = vec![false; n];
    for &i in &rank {
        kept[i] = (0..n).all(|j| {
            !(kept[j] && precedes(objs, j, i) && objs[j].cls == objs[i].cls && iou(&objs[j].bbox, &objs[i].bbox) > thresh)
        });
    }
    rank.into_iter().filter(|&i| kept[i]).collect()
}

pub fn assoc_oracle(hands: &[DetectedObject], bodies: &[DetectedObject], ratio: f64) -> Vec<Option<usize>> {
    hands
        .iter()
        .map(|h| {
            let target = h.bbox.center() + h.assoc.unwrap();
            let mut cands: Vec<(f64, f64, usize)> = bodies
                .iter()
                .enumerate()
                .map(|(i, b)| ((target - b.bbox.center()).norm(), -b.score, i))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands
                .first()
                .filter(|(r, _, i)| *r <= ratio * bodies[*i].bbox.diagonal())
                .map(|c| c.2)
        })
        .collect()
}

/// Library NMS against the oracle on `n` random instances.
pub fn nms_agreement(seed: u64, n: usize, thresh: f64) -> Result<usize, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut boxes = 0;
    for k in 0..n {
        let m = rng.below(25);
        let objs: Vec<DetectedObject> = (0..m).map(|_| random_object(&mut rng, false)).collect();
        let (got, want) = (nms_indices(&objs, thresh), nms_oracle(&objs, thresh));
        ensure(got == want, || format!("instance {k}: kept {got:?}, oracle {want:?}"))?;
        boxes += m;
    }
    Ok(boxes)
}

pub fn association_agreement(seed: u64, n: usize, ratio: f64) -> Result<usize, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut hands_seen = 0;
    for k in 0..n {
        let hands: Vec<DetectedObject> = (0..rng.below(6)).map(|_| random_object(&mut rng, true)).collect();
        let mut bodies: Vec<DetectedObject> = (0..rng.below(5))
            .map(|_| {
                let mut b = random_object(&mut rng, false);
                b.cls = Class::Body;
                b.angle = None;
                b.assoc = None;
                b
            })
            .collect();
        // Duplicate a body now and then to exercise the tie-break.
        if bodies.len() > 1 && rng.chance(0.3) {
            let mut twin = bodies[0].clone();
            twin.score = (twin.score - 0.1).max(0.0);
            bodies.push(twin);
        }
        let got: Vec<Option<usize>> = associate(&hands, &bodies, ratio).iter().map(|a| a.body_index).collect();
        let want = assoc_oracle(&hands, &bodies, ratio);
        ensure(got == want, || format!("instance {k}: {got:?}, oracle {want:?}"))?;
        hands_seen += hands.len();
    }
    Ok(hands_seen)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RoundTrip {
    pub objects: usize,
    pub worst_px: f64,
    pub worst_rad: f64,
}

/// Encodes random ground truth onto the grid, decodes at `conf`, and
/// measures every assigned object.
pub fn encode_decode_round_trip(seed: u64, n: usize, conf: f64) -> Result<RoundTrip, String> {
    let spec = grid();
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut rt = RoundTrip::default();
    for _ in 0..n {
        let gts: Vec<GtObject> = (0..1 + rng.below(6))
            .map(|_| {
                let hand = rng.chance(0.6);
                let c = Point2::new(rng.uniform(5.0, 443.0), rng.uniform(5.0, 443.0));
                let (w, h) = if hand {
                    (rng.uniform(25.0, 55.0), rng.uniform(25.0, 55.0))
                } else {
                    (rng.uniform(80.0, 160.0), rng.uniform(120.0, 260.0))
                };
                GtObject {
                    bbox: BBox::from_center(c, w, h).unwrap(),
                    cls: if hand { Class::Hand } else { Class::Body },
                    angle: hand.then(|| Angle::new(rng.uniform(-3.14, 3.14))),
                    body_center: hand.then(|| c + Point2::new(rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0))),
                }
            })
            .collect();
        let decoded = decode(&encode(&gts, &spec), conf).map_err(|e| e.to_string())?;
        let slots = assign(&gts, &spec);
        ensure(decoded.len() == slots.iter().flatten().count(), || "decoded count differs from assigned slots".into())?;
        for (g, slot) in gts.iter().zip(&slots) {
            if slot.is_none() {
                continue;
            }
            let d = decoded
                .iter()
                .find(|d| d.cls == g.cls && (d.bbox.center() - g.bbox.center()).norm() < 0.5)
                .ok_or_else(|| format!("object at {:?} did not decode", g.bbox))?;
            for (a, b) in [(d.bbox.l, g.bbox.l), (d.bbox.t, g.bbox.t), (d.bbox.r, g.bbox.r), (d.bbox.b, g.bbox.b)] {
                rt.worst_px = rt.worst_px.max((a - b).abs());
            }
            if let Some(t) = g.angle {
                rt.worst_rad = rt.worst_rad.max(d.angle.unwrap().distance(t));
                let bc = d.predicted_body_center().unwrap();
                rt.worst_px = rt.worst_px.max((bc - g.body_center.unwrap()).norm());
            }
            rt.objects += 1;
        }
    }
    ensure(rt.worst_px < 0.5 && rt.worst_rad < 1e-3, || format!("{rt:?}"))?;
    Ok(rt)
}
