//! 21-point hand skeleton conventions.

use crate::geometry::{Point2, Point3};
use serde::{Deserialize, Serialize};

pub const NUM_JOINTS: usize = 21;
pub const WRIST: usize = 0;
pub const THUMB_TIP: usize = 4;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_MCP: usize = 9;
pub const MIDDLE_TIP: usize = 12;

/// Parent/child pairs: thumb 1-4, index 5-8, middle 9-12, ring 13-16,
/// pinky 17-20, every chain rooted at the wrist.
pub const BONES: [(usize, usize); 20] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandLandmarks2D {
    pub points: [Point2; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
}

impl HandLandmarks2D {
    pub fn visible(points: [Point2; NUM_JOINTS]) -> Self {
        Self {
            points,
            confidence: [1.0; NUM_JOINTS],
        }
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Self {
        Self {
            points: self.points.map(f),
            confidence: self.confidence,
        }
    }

    /// Midpoint of thumb tip and index tip: the center of the "O".
    pub fn o_center(&self) -> Point2 {
        (self.points[THUMB_TIP] + self.points[INDEX_TIP]) * 0.5
    }

    /// Side of the axis-aligned square enclosing all points.
    pub fn extent(&self) -> f64 {
        let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
        for p in &self.points {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (hi.x - lo.x).max(hi.y - lo.y)
    }
}

/// Root-relative (wrist at the origin) 3D joints in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandLandmarks3D {
    pub points: [Point3; NUM_JOINTS],
}

impl HandLandmarks3D {
    pub fn root_relative(points: &[Point3; NUM_JOINTS]) -> Self {
        let root = points[WRIST];
        Self {
            points: points.map(|p| p - root),
        }
    }

    /// Wrist to middle fingertip along the skeleton.
    pub fn hand_scale(&self) -> f64 {
        let chain = [WRIST, MIDDLE_MCP, 10, 11, MIDDLE_TIP];
        chain.windows(2).map(|w| (self.points[w[1]] - self.points[w[0]]).norm()).sum()
    }

    pub fn mean_joint_error(&self, other: &HandLandmarks3D) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (*a - *b).norm())
            .sum::<f64>()
            / NUM_JOINTS as f64
    }
}
