//! Shared domain types: boxes, detections, tracklets and the elementary
//! geometry/feature operations everything else is built from.

use nalgebra::Point2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("bounding box must have positive finite size, got w={w} h={h}")]
    InvalidBox { w: f64, h: f64 },
    #[error("feature vector has zero norm")]
    ZeroNormFeature,
    #[error("feature dimensions differ: {0} vs {1}")]
    FeatureDimMismatch(usize, usize),
    #[error("tracklet must contain at least one detection")]
    EmptyTracklet,
    #[error("tracklet frames must be consecutive: frame {found} follows {prev}")]
    NonConsecutiveFrames { prev: usize, found: usize },
}

/// Axis-aligned bounding box in center/size form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, TypeError> {
        if !(w > 0.0 && h > 0.0 && cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(TypeError::InvalidBox { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Build from left/top corner plus size (the MOT file convention).
    pub fn from_ltwh(left: f64, top: f64, w: f64, h: f64) -> Result<Self, TypeError> {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner points ordered top-left, top-right, bottom-right, bottom-left.
    pub fn to_corners(&self) -> [Point2<f64>; 4] {
        let (l, t, r, b) = (self.left(), self.top(), self.right(), self.bottom());
        [
            Point2::new(l, t),
            Point2::new(r, t),
            Point2::new(r, b),
            Point2::new(l, b),
        ]
    }

    /// Inverse of [`to_corners`](Self::to_corners) for the same ordering.
    pub fn from_corners(corners: &[Point2<f64>; 4]) -> Result<Self, TypeError> {
        let l = corners[0].x;
        let t = corners[0].y;
        let r = corners[2].x;
        let b = corners[2].y;
        Self::new((l + r) / 2.0, (t + b) / 2.0, r - l, b - t)
    }

    /// Intersection-over-union; 0 for disjoint boxes, 1 for identical ones.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }

    /// Scale all coordinates into frame-relative units.
    pub fn normalize(&self, meta: &FrameMeta) -> BoundingBox {
        let fw = meta.width as f64;
        let fh = meta.height as f64;
        BoundingBox {
            cx: self.cx / fw,
            cy: self.cy / fh,
            w: self.w / fw,
            h: self.h / fh,
        }
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, meta: &FrameMeta) -> BoundingBox {
        let fw = meta.width as f64;
        let fh = meta.height as f64;
        BoundingBox {
            cx: self.cx * fw,
            cy: self.cy * fh,
            w: self.w * fw,
            h: self.h * fh,
        }
    }
}

/// Fixed-length appearance embedding attached to a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeature(pub Vec<f64>);

impl AppearanceFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; errors on zero-norm inputs since the angle is
    /// undefined for a degenerate feature.
    pub fn cosine_similarity(&self, other: &AppearanceFeature) -> Result<f64, TypeError> {
        if self.dim() != other.dim() {
            return Err(TypeError::FeatureDimMismatch(self.dim(), other.dim()));
        }
        let na = self.norm();
        let nb = other.norm();
        if na == 0.0 || nb == 0.0 {
            return Err(TypeError::ZeroNormFeature);
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// One detected object instance at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub feature: AppearanceFeature,
}

/// Frame geometry used for coordinate normalization; fps is informational.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
}

impl FrameMeta {
    pub fn new(width: u32, height: u32, fps: f64) -> Self {
        assert!(width > 0 && height > 0, "frame size must be positive");
        Self { width, height, fps }
    }
}

/// A maximal run of frame-consecutive detections of one object; the vertex
/// unit of the tracklet graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: usize,
    detections: Vec<Detection>,
}

impl Tracklet {
    /// Detections must be non-empty, strictly consecutive in frame index and
    /// carry features of one common dimension.
    pub fn new(id: usize, detections: Vec<Detection>) -> Result<Self, TypeError> {
        if detections.is_empty() {
            return Err(TypeError::EmptyTracklet);
        }
        let dim = detections[0].feature.dim();
        for pair in detections.windows(2) {
            if pair[1].frame != pair[0].frame + 1 {
                return Err(TypeError::NonConsecutiveFrames {
                    prev: pair[0].frame,
                    found: pair[1].frame,
                });
            }
        }
        for d in &detections {
            if d.feature.dim() != dim {
                return Err(TypeError::FeatureDimMismatch(dim, d.feature.dim()));
            }
        }
        Ok(Self { id, detections })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn start_frame(&self) -> usize {
        self.detections[0].frame
    }

    pub fn end_frame(&self) -> usize {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn first(&self) -> &Detection {
        &self.detections[0]
    }

    pub fn last(&self) -> &Detection {
        &self.detections[self.detections.len() - 1]
    }

    /// Mean of the member features (not renormalized).
    pub fn mean_feature(&self) -> AppearanceFeature {
        let dim = self.detections[0].feature.dim();
        let mut acc = vec![0.0; dim];
        for d in &self.detections {
            for (a, v) in acc.iter_mut().zip(&d.feature.0) {
                *a += v;
            }
        }
        let n = self.detections.len() as f64;
        AppearanceFeature(acc.into_iter().map(|v| v / n).collect())
    }

    /// True iff the two tracklets share at least one frame index.
    pub fn time_overlap(&self, other: &Tracklet) -> bool {
        self.start_frame() <= other.end_frame() && other.start_frame() <= self.end_frame()
    }

    /// Smallest |t_u - t_w| over all frame pairs; 0 exactly when overlapping.
    pub fn time_gap(&self, other: &Tracklet) -> usize {
        if self.time_overlap(other) {
            0
        } else if self.end_frame() < other.start_frame() {
            other.start_frame() - self.end_frame()
        } else {
            self.start_frame() - other.end_frame()
        }
    }
}
