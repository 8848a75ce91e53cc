//! Bounding-box geometry and the 12-way relative position labels used by
//! relative position prediction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};

/// Axis-aligned box in normalized image coordinates (y grows downwards).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(TapError::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Normalizes a pixel-space box by the image size.
    pub fn from_pixels(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(TapError::InvalidBox([x1, y1, x2, y2]));
        }
        Self::new(x1 / width, y1 / height, x2 / width, y2 / height)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// The 4-d coordinate feature fed to the region embeddings.
    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = TapError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `inner`'s area that lies inside `outer`.
pub fn containment_ratio(inner: &BoundingBox, outer: &BoundingBox) -> f64 {
    (inner.intersection_area(outer) / inner.area()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelativePosition {
    On,
    Cover,
    Overlap,
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
    Unrelated,
}

impl RelativePosition {
    pub const COUNT: usize = 12;

    pub const ALL: [RelativePosition; 12] = [
        RelativePosition::On,
        RelativePosition::Cover,
        RelativePosition::Overlap,
        RelativePosition::N,
        RelativePosition::NE,
        RelativePosition::E,
        RelativePosition::SE,
        RelativePosition::S,
        RelativePosition::SW,
        RelativePosition::W,
        RelativePosition::NW,
        RelativePosition::Unrelated,
    ];

    /// Orientation sectors counterclockwise from east.
    const SECTORS: [RelativePosition; 8] = [
        RelativePosition::E,
        RelativePosition::NE,
        RelativePosition::N,
        RelativePosition::NW,
        RelativePosition::W,
        RelativePosition::SW,
        RelativePosition::S,
        RelativePosition::SE,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_orientation(self) -> bool {
        Self::SECTORS.contains(&self)
    }
}

impl fmt::Display for RelativePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Thresholds of the relation rules. All are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationThresholds {
    pub on_containment: f64,
    pub cover_containment: f64,
    pub overlap_iou: f64,
    pub unrelated_distance_factor: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        Self {
            on_containment: 0.9,
            cover_containment: 0.9,
            overlap_iou: 0.1,
            unrelated_distance_factor: 3.0,
        }
    }
}

// Ratios are compared inclusively; this absorbs float rounding at exact ties.
const RATIO_EPS: f64 = 1e-12;

/// Label of the scene-text box `ocr` relative to the object box `obj`.
pub fn classify_relation_with(
    obj: &BoundingBox,
    ocr: &BoundingBox,
    t: &RelationThresholds,
) -> RelativePosition {
    if containment_ratio(ocr, obj) >= t.on_containment - RATIO_EPS {
        return RelativePosition::On;
    }
    if containment_ratio(obj, ocr) >= t.cover_containment - RATIO_EPS {
        return RelativePosition::Cover;
    }
    if iou(obj, ocr) >= t.overlap_iou - RATIO_EPS {
        return RelativePosition::Overlap;
    }
    let (ox, oy) = obj.center();
    let (sx, sy) = ocr.center();
    let (dx, dy) = (sx - ox, sy - oy);
    let mean_diag = 0.5 * (obj.diagonal() + ocr.diagonal());
    if dx.hypot(dy) > t.unrelated_distance_factor * mean_diag {
        return RelativePosition::Unrelated;
    }
    orientation(dx, dy)
}

pub fn classify_relation(obj: &BoundingBox, ocr: &BoundingBox) -> RelativePosition {
    classify_relation_with(obj, ocr, &RelationThresholds::default())
}

/// Eight-way orientation of an image-space offset. Sectors are 45° wide and
/// centered on E, NE, N, ...; a boundary angle goes to the counterclockwise
/// sector.
pub fn orientation(dx: f64, dy: f64) -> RelativePosition {
    // image y points down, so flip it to get a math angle
    let mut deg = (-dy).atan2(dx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    let sector = ((deg + 22.5) / 45.0).floor() as usize % 8;
    RelativePosition::SECTORS[sector]
}

pub fn is_on_with(obj: &BoundingBox, ocr: &BoundingBox, t: &RelationThresholds) -> bool {
    classify_relation_with(obj, ocr, t) == RelativePosition::On
}

pub fn is_on(obj: &BoundingBox, ocr: &BoundingBox) -> bool {
    is_on_with(obj, ocr, &RelationThresholds::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.2, 0.0, 0.2, 0.5).is_err());
        assert!(BoundingBox::new(0.0, 0.5, 0.1, 0.4).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 0.1, 0.1).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0.5,0.5,0.1,0.9]").is_err());
    }

    #[test]
    fn pixel_boxes_are_normalized() {
        let b = BoundingBox::from_pixels(10.0, 20.0, 60.0, 120.0, 100.0, 200.0).unwrap();
        assert_eq!(b.to_array(), [0.1, 0.1, 0.6, 0.6]);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.2, 0.2);
        assert_close(iou(&a, &a), 1.0, 1e-12);
        assert_eq!(iou(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.5, 0.5, 0.6, 0.6)), 0.0);
        // inter = .02, union = .06
        assert_close(iou(&a, &bx(0.1, 0.0, 0.3, 0.2)), 1.0 / 3.0, 1e-9);
    }

    #[test]
    fn containment_examples() {
        let outer = bx(0.0, 0.0, 0.5, 0.5);
        assert_close(containment_ratio(&bx(0.1, 0.1, 0.2, 0.2), &outer), 1.0, 1e-12);
        assert_eq!(containment_ratio(&bx(0.6, 0.6, 0.7, 0.7), &outer), 0.0);
        assert_close(
            containment_ratio(&bx(0.0, 0.0, 0.2, 0.2), &bx(0.0, 0.0, 0.1, 0.2)),
            0.5,
            1e-12
        );
    }

    #[test]
    fn relation_examples() {
        let obj = bx(0.1, 0.1, 0.6, 0.6);
        let ocr = bx(0.2, 0.2, 0.3, 0.25);
        assert_eq!(classify_relation(&obj, &ocr), RelativePosition::On);
        assert_eq!(classify_relation(&ocr, &obj), RelativePosition::Cover);
        assert!(is_on(&obj, &ocr));
        assert_eq!(
            classify_relation(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.4, 0.0, 0.5, 0.1)),
            RelativePosition::E
        );
        assert!(!is_on(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.8, 0.8, 0.9, 0.9)));
        assert_eq!(
            classify_relation(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.8, 0.8, 0.9, 0.9)),
            RelativePosition::Unrelated
        );
        assert_eq!(
            classify_relation(&bx(0.0, 0.0, 0.2, 0.2), &bx(0.1, 0.0, 0.3, 0.2)),
            RelativePosition::Overlap
        );
    }

    #[test]
    fn orientation_sectors() {
        assert_eq!(orientation(1.0, 0.0), RelativePosition::E);
        assert_eq!(orientation(0.0, -1.0), RelativePosition::N);
        assert_eq!(orientation(-1.0, 0.0), RelativePosition::W);
        assert_eq!(orientation(0.0, 1.0), RelativePosition::S);
        assert_eq!(orientation(1.0, -1.0), RelativePosition::NE);
        assert_eq!(orientation(-1.0, 1.0), RelativePosition::SW);
        assert_eq!(orientation(1.0, 1.0), RelativePosition::SE);
        assert_eq!(orientation(-1.0, -1.0), RelativePosition::NW);
    }

    #[test]
    fn label_indices_round_trip() {
        for (i, l) in RelativePosition::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(RelativePosition::from_index(i), Some(*l));
        }
        assert_eq!(RelativePosition::from_index(12), None);
    }
}
