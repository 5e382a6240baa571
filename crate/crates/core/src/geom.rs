//! Axis-aligned 3D boxes in voxel space.
//!
//! Coordinates are ordered `(z, y, x)` throughout. Box offsets use the
//! center / log-size parameterisation of two-stage detectors:
//! `(tz, ty, tx, td, th, tw)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest box extent `decode_offsets` can produce along any axis.
pub const MAX_BOX_SIZE: f64 = 1e4;
/// Smallest box extent `decode_offsets` can produce along any axis.
pub const MIN_BOX_SIZE: f64 = 1e-3;

pub type Vec3 = [f64; 3];
pub type Offsets = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct Box3 {
    center: Vec3,
    size: Vec3,
}

#[derive(Deserialize)]
struct RawBox {
    center: Vec3,
    size: Vec3,
}

impl TryFrom<RawBox> for Box3 {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        Box3::new(raw.center, raw.size)
    }
}

impl Box3 {
    pub fn new(center: Vec3, size: Vec3) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("box center must be finite, got {center:?}")));
        }
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!(
                "box size must be positive and finite, got {size:?}"
            )));
        }
        Ok(Self { center, size })
    }

    pub fn cube(center: Vec3, side: f64) -> Result<Self> {
        Self::new(center, [side; 3])
    }

    /// Builds a box from its lower and upper corners.
    pub fn from_corners(lo: Vec3, hi: Vec3) -> Result<Self> {
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let size = [0, 1, 2].map(|a| hi[a] - lo[a]);
        Self::new(center, size)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn size(&self) -> Vec3 {
        self.size
    }

    pub fn lo(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] - 0.5 * self.size[a])
    }

    pub fn hi(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] + 0.5 * self.size[a])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn translated(&self, by: Vec3) -> Self {
        Self {
            center: [0, 1, 2].map(|a| self.center[a] + by[a]),
            size: self.size,
        }
    }

    /// Clips the box to `[0, bounds]` on every axis, keeping at least
    /// `min_size` of extent inside the bounds.
    pub fn clip_to(&self, bounds: Vec3, min_size: f64) -> Self {
        let lo = self.lo();
        let hi = self.hi();
        let mut center = [0.0; 3];
        let mut size = [0.0; 3];
        for a in 0..3 {
            let min_size = min_size.min(bounds[a]);
            let mut l = lo[a].clamp(0.0, bounds[a]);
            let mut h = hi[a].clamp(0.0, bounds[a]);
            if h - l < min_size {
                let mid = (0.5 * (l + h)).clamp(0.5 * min_size, bounds[a] - 0.5 * min_size);
                l = mid - 0.5 * min_size;
                h = mid + 0.5 * min_size;
            }
            center[a] = 0.5 * (l + h);
            size[a] = h - l;
        }
        Self { center, size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub center: Vec3,
    pub radius: f64,
}

impl Annotation {
    pub fn new(center: Vec3, radius: f64) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) || !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid(format!(
                "annotation needs a finite center and positive radius, got {center:?} r={radius}"
            )));
        }
        Ok(Self { center, radius })
    }

    /// The cube of side `2R` used wherever an annotation stands in for a box.
    pub fn as_box(&self) -> Box3 {
        Box3 {
            center: self.center,
            size: [2.0 * self.radius; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: Box3, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score })
    }
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

pub fn intersection_volume(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi, blo, bhi) = (a.lo(), a.hi(), b.lo(), b.hi());
    (0..3)
        .map(|i| (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0))
        .product()
}

pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A detection hits an annotation when its center lies within the
/// annotation radius (boundary inclusive).
pub fn center_hit(det: &Detection, ann: &Annotation) -> bool {
    distance(det.bbox.center(), ann.center) <= ann.radius
}

/// Indices of the boxes kept by greedy NMS, highest score first.
///
/// Ties in score keep input order. A box is suppressed when its IoU with an
/// already kept box is `>= iou_threshold`.
pub fn nms_indices(boxes: &[Box3], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou3d(&boxes[k], &boxes[i]) < iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<Box3> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

pub fn encode_offsets(gt: &Box3, anchor: &Box3) -> Offsets {
    let mut t = [0.0; 6];
    for a in 0..3 {
        t[a] = (gt.center[a] - anchor.center[a]) / anchor.size[a];
        t[a + 3] = (gt.size[a] / anchor.size[a]).ln();
    }
    t
}

/// Inverse of [`encode_offsets`]. Decoded extents are clamped to
/// `[MIN_BOX_SIZE, MAX_BOX_SIZE]`.
pub fn decode_offsets(offsets: &Offsets, anchor: &Box3) -> Box3 {
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = anchor.center[a] + offsets[a] * anchor.size[a];
        // exp may overflow to infinity or underflow to zero; the clamp absorbs both
        size[a] = (anchor.size[a] * offsets[a + 3].exp()).clamp(MIN_BOX_SIZE, MAX_BOX_SIZE);
    }
    Box3 { center, size }
}
