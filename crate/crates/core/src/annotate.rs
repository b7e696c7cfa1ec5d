//! Annotated frames for people: boxes, hand-to-body links between top-left
//! corners in a shared color, skeletons, and a red dot on each "O" center.

use crate::detect::Class;
use crate::geometry::Point2;
use crate::hand::BONES;
use crate::image::Image;
use crate::pipeline::{FrameResult, Role};

const PALETTE: [[f32; 3]; 6] = [
    [0.10, 0.75, 0.95],
    [0.95, 0.70, 0.10],
    [0.60, 0.30, 0.95],
    [0.10, 0.85, 0.35],
    [0.95, 0.35, 0.75],
    [0.30, 0.50, 1.00],
];
const RED: [f32; 3] = [1.0, 0.0, 0.0];
const GRAY: [f32; 3] = [0.5, 0.5, 0.5];

fn put(img: &mut Image, x: i64, y: i64, c: [f32; 3]) {
    if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
        return;
    }
    for (ch, &v) in c.iter().enumerate().take(img.channels) {
        img.set(ch, y as usize, x as usize, v);
    }
}

pub fn draw_line(img: &mut Image, a: Point2, b: Point2, c: [f32; 3]) {
    let steps = (b - a).norm().ceil().max(1.0) as usize;
    for i in 0..=steps {
        let p = a + (b - a) * (i as f64 / steps as f64);
        put(img, p.x.floor() as i64, p.y.floor() as i64, c);
    }
}

pub fn draw_rect(img: &mut Image, l: f64, t: f64, r: f64, b: f64, c: [f32; 3]) {
    let (tl, tr, br, bl) = (Point2::new(l, t), Point2::new(r, t), Point2::new(r, b), Point2::new(l, b));
    draw_line(img, tl, tr, c);
    draw_line(img, tr, br, c);
    draw_line(img, br, bl, c);
    draw_line(img, bl, tl, c);
}

pub fn draw_dot(img: &mut Image, p: Point2, radius: f64, c: [f32; 3]) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Draws `result` onto a copy of `img`.
pub fn annotate(img: &Image, result: &FrameResult) -> Image {
    let mut out = img.clone();
    let color_of = |body: Option<usize>| body.map_or(GRAY, |b| PALETTE[b % PALETTE.len()]);
    for d in result.detections.iter().filter(|d| d.class == Class::Body) {
        let c = if d.patient == Some(true) { GRAY } else { color_of(Some(d.id)) };
        draw_rect(&mut out, d.l, d.t, d.r, d.b, c);
    }
    for h in &result.hands {
        let Some(d) = result.detections.get(h.detection) else { continue };
        let c = color_of(h.body);
        draw_rect(&mut out, d.l, d.t, d.r, d.b, c);
        if let Some(b) = h.body.and_then(|b| result.detections.get(b)) {
            draw_line(&mut out, Point2::new(d.l, d.t), Point2::new(b.l, b.t), c);
        }
        let pts = &h.landmarks.points;
        for &(a, b) in &BONES {
            draw_line(&mut out, pts[a], pts[b], c);
        }
        if h.role == Role::Technician {
            draw_dot(&mut out, h.o_center, 2.5, RED);
        }
    }
    out
}
