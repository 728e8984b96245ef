//! Two-view epipolar geometry: robust fundamental-matrix estimation from
//! point correspondences and bounding-box prediction under camera motion.
//!
//! Convention: for a correspondence with `p1` in frame t and `p2` in frame
//! t+1, the fundamental matrix satisfies `p1^T F p2 = 0`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Point2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::BoundingBox;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("degenerate geometry: best consensus {found} of {needed} required inliers")]
    DegenerateGeometry { found: usize, needed: usize },
    #[error("point maps to a zero epipolar line (epipole of a degenerate F)")]
    DegenerateLine,
    #[error("normal matrix is rank deficient; increase the regularization weight")]
    RankDeficient,
    #[error("predicted box collapsed (non-positive width or height)")]
    CollapsedBox,
    #[error("fundamental matrix estimate is not finite")]
    NonFiniteEstimate,
}

/// A matched point pair: `p1` in frame t, `p2` in frame t+1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p1: Point2<f64>,
    pub p2: Point2<f64>,
}

impl Correspondence {
    pub fn new(p1: Point2<f64>, p2: Point2<f64>) -> Self {
        Self { p1, p2 }
    }
}

/// RANSAC parameters for [`estimate_fundamental`]. The inlier threshold is a
/// Sampson distance in pixels.
#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 1.0,
            min_inlier_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Rank-2, unit-Frobenius-norm fundamental matrix with `p1^T F p2 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Projects an arbitrary 3x3 matrix onto the invariants: the smallest
    /// singular value is zeroed, the result is scaled to unit Frobenius norm
    /// and the sign is fixed so the largest-magnitude entry is positive.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteEstimate);
        }
        let svd = m.svd(true, true);
        let u = svd.u.ok_or(GeometryError::NonFiniteEstimate)?;
        let v_t = svd.v_t.ok_or(GeometryError::NonFiniteEstimate)?;
        let mut s = svd.singular_values;
        // nalgebra orders singular values descending for 3x3; zero the last.
        s[2] = 0.0;
        let mut rank2 = u * Matrix3::from_diagonal(&s) * v_t;
        let norm = rank2.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GeometryError::NonFiniteEstimate);
        }
        rank2 /= norm;
        // Canonical sign: first row-major entry of maximal magnitude positive.
        let mut best = (0usize, 0usize);
        let mut best_abs = -1.0;
        for r in 0..3 {
            for c in 0..3 {
                if rank2[(r, c)].abs() > best_abs {
                    best_abs = rank2[(r, c)].abs();
                    best = (r, c);
                }
            }
        }
        if rank2[best] < 0.0 {
            rank2 = -rank2;
        }
        Ok(Self { m: rank2 })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Epipolar line in frame t+1 for a point of frame t: `l = F^T (p, 1)`,
    /// scaled so the normal (a, b) has unit length. Evaluating the line at a
    /// point then yields a signed distance in pixels.
    pub fn epipolar_line(&self, p: Point2<f64>) -> Result<EpipolarLine, GeometryError> {
        let l = self.m.transpose() * Vector3::new(p.x, p.y, 1.0);
        EpipolarLine::from_homogeneous(l)
    }

    /// First-order geometric (Sampson) distance of a correspondence, pixels.
    pub fn sampson_distance(&self, c: &Correspondence) -> f64 {
        let x1 = Vector3::new(c.p1.x, c.p1.y, 1.0);
        let x2 = Vector3::new(c.p2.x, c.p2.y, 1.0);
        let val = (x1.transpose() * self.m * x2)[(0, 0)];
        let ft_x1 = self.m.transpose() * x1; // gradient wrt p2
        let f_x2 = self.m * x2; // gradient wrt p1
        let denom = ft_x1.x * ft_x1.x + ft_x1.y * ft_x1.y + f_x2.x * f_x2.x + f_x2.y * f_x2.y;
        if denom <= f64::MIN_POSITIVE {
            return f64::INFINITY;
        }
        val.abs() / denom.sqrt()
    }
}

/// Image line a*x + b*y + c = 0 with a^2 + b^2 = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    fn from_homogeneous(l: Vector3<f64>) -> Result<Self, GeometryError> {
        let norm = (l.x * l.x + l.y * l.y).sqrt();
        if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self {
            a: l.x / norm,
            b: l.y / norm,
            c: l.z / norm,
        })
    }

    /// Signed perpendicular distance of the point from the line.
    pub fn eval(&self, p: Point2<f64>) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }
}

/// Similarity transform for Hartley normalization: centroid to the origin,
/// mean distance sqrt(2). Returns `None` for fully coincident points.
fn hartley_transform(points: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized eight-point solve on an explicit subset of correspondences.
fn eight_point(matches: &[Correspondence], idx: &[usize]) -> Option<FundamentalMatrix> {
    let pts1: Vec<_> = idx.iter().map(|&i| matches[i].p1).collect();
    let pts2: Vec<_> = idx.iter().map(|&i| matches[i].p2).collect();
    let t1 = hartley_transform(&pts1)?;
    let t2 = hartley_transform(&pts2)?;

    let mut a = DMatrix::<f64>::zeros(idx.len(), 9);
    for (row, (p1, p2)) in pts1.iter().zip(&pts2).enumerate() {
        let q1 = t1 * Vector3::new(p1.x, p1.y, 1.0);
        let q2 = t2 * Vector3::new(p2.x, p2.y, 1.0);
        let (x1, y1) = (q1.x / q1.z, q1.y / q1.z);
        let (x2, y2) = (q2.x / q2.z, q2.y / q2.z);
        // p1^T F p2 = 0 with F flattened row-major.
        a[(row, 0)] = x1 * x2;
        a[(row, 1)] = x1 * y2;
        a[(row, 2)] = x1;
        a[(row, 3)] = y1 * x2;
        a[(row, 4)] = y1 * y2;
        a[(row, 5)] = y1;
        a[(row, 6)] = x2;
        a[(row, 7)] = y2;
        a[(row, 8)] = 1.0;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    // Smallest singular value may not be last for a rank-deficient system;
    // pick explicitly.
    let mut min_i = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[min_i] {
            min_i = i;
        }
    }
    let f = v_t.row(min_i);
    let fn_norm = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    // Undo normalization: p1^T T1^T Fn T2 p2 = 0.
    let f_full = t1.transpose() * fn_norm * t2;
    FundamentalMatrix::new(f_full).ok()
}

/// Robust fundamental-matrix estimation: RANSAC over normalized eight-point
/// fits with Sampson-distance scoring, refit on the best consensus set.
/// Deterministic for a fixed seed. Returns the matrix and per-match inlier
/// flags under the refit model.
pub fn estimate_fundamental(
    matches: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(FundamentalMatrix, Vec<bool>), GeometryError> {
    let n = matches.len();
    if n < 8 {
        return Err(GeometryError::InsufficientMatches(n));
    }
    let needed = (cfg.min_inlier_fraction * n as f64).ceil().max(8.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..cfg.max_iterations {
        let pick: Vec<usize> = sample(&mut rng, n, 8).into_iter().collect();
        let Some(f) = eight_point(matches, &pick) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| f.sampson_distance(&matches[i]) <= cfg.inlier_threshold)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            if best_inliers.len() == n {
                break;
            }
        }
    }

    if best_inliers.len() < needed {
        return Err(GeometryError::DegenerateGeometry {
            found: best_inliers.len(),
            needed,
        });
    }
    let refit = eight_point(matches, &best_inliers).ok_or(GeometryError::DegenerateGeometry {
        found: best_inliers.len(),
        needed,
    })?;
    let flags: Vec<bool> = matches
        .iter()
        .map(|m| refit.sampson_distance(m) <= cfg.inlier_threshold)
        .collect();
    Ok((refit, flags))
}

/// Predicts where a box moves between frames using the epipolar lines of its
/// four corners plus a size-preservation term, solved as linear least squares
/// over (left, top, right, bottom). A Tikhonov term with weight `reg_weight`
/// pulls toward the previous box; it resolves the rank deficiency of special
/// camera motions (e.g. translation along an image axis), where the epipolar
/// constraints leave a translation direction free.
pub fn predict_box(
    box_t: &BoundingBox,
    f: &FundamentalMatrix,
    reg_weight: f64,
) -> Result<BoundingBox, GeometryError> {
    let corners = box_t.to_corners();
    let mut lines = [EpipolarLine { a: 0.0, b: 0.0, c: 0.0 }; 4];
    for (line, corner) in lines.iter_mut().zip(corners.iter()) {
        *line = f.epipolar_line(*corner)?;
    }

    // Unknowns p = (left, top, right, bottom).
    // Rows: epipolar residual of each corner, then the two size equations.
    let mut a = [[0.0f64; 4]; 6];
    let mut y = [0.0f64; 6];
    // Top-left (l, t), top-right (r, t), bottom-right (r, b), bottom-left (l, b).
    a[0][0] = lines[0].a;
    a[0][1] = lines[0].b;
    y[0] = -lines[0].c;
    a[1][2] = lines[1].a;
    a[1][1] = lines[1].b;
    y[1] = -lines[1].c;
    a[2][2] = lines[2].a;
    a[2][3] = lines[2].b;
    y[2] = -lines[2].c;
    a[3][0] = lines[3].a;
    a[3][3] = lines[3].b;
    y[3] = -lines[3].c;
    a[4][0] = -1.0;
    a[4][2] = 1.0;
    y[4] = box_t.w;
    a[5][1] = -1.0;
    a[5][3] = 1.0;
    y[5] = box_t.h;

    let p0 = Vector4::new(box_t.left(), box_t.top(), box_t.right(), box_t.bottom());
    let mut ata = Matrix4::<f64>::zeros();
    let mut aty = Vector4::<f64>::zeros();
    for row in 0..6 {
        for i in 0..4 {
            aty[i] += a[row][i] * y[row];
            for j in 0..4 {
                ata[(i, j)] += a[row][i] * a[row][j];
            }
        }
    }
    for i in 0..4 {
        ata[(i, i)] += reg_weight;
        aty[i] += reg_weight * p0[i];
    }

    let lu = ata.lu();
    let det = lu.determinant();
    if det.abs() <= 1e-12 * ata.norm().powi(4).max(f64::MIN_POSITIVE) {
        return Err(GeometryError::RankDeficient);
    }
    let p = lu.solve(&aty).ok_or(GeometryError::RankDeficient)?;
    let (l, t, r, b) = (p[0], p[1], p[2], p[3]);
    if !(r > l && b > t) || !p.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::CollapsedBox);
    }
    BoundingBox::new((l + r) / 2.0, (t + b) / 2.0, r - l, b - t)
        .map_err(|_| GeometryError::CollapsedBox)
}

/// 3x3 cross-product matrix of a vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole camera: intrinsics `k`, world-to-camera rotation `r`, center `c`.
/// Projects world point X to pixel coordinates via `K R (X - C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub c: Vector3<f64>,
}

impl Camera {
    pub fn project(&self, x: &Vector3<f64>) -> Option<Point2<f64>> {
        let pc = self.r * (x - self.c);
        if pc.z <= 1e-9 {
            return None;
        }
        let h = self.k * pc;
        Some(Point2::new(h.x / h.z, h.y / h.z))
    }

    /// Depth of a world point along the camera's optical axis.
    pub fn depth(&self, x: &Vector3<f64>) -> f64 {
        (self.r * (x - self.c)).z
    }
}

/// The fundamental matrix relating two calibrated views, in this module's
/// `p1^T F p2 = 0` convention (`p1` from `cam1`, `p2` from `cam2`). `None`
/// when the camera centers coincide (no parallax, F undefined).
pub fn fundamental_from_cameras(
    cam1: &Camera,
    cam2: &Camera,
) -> Option<FundamentalMatrix> {
    let baseline = cam2.c - cam1.c;
    if baseline.norm() <= 1e-12 {
        return None;
    }
    let r_rel = cam2.r * cam1.r.transpose();
    let t_rel = cam2.r * (cam1.c - cam2.c);
    let essential = skew(&t_rel) * r_rel;
    let k1_inv = cam1.k.try_inverse()?;
    let k2_inv = cam2.k.try_inverse()?;
    // Standard form: x2^T F_std x1 = 0; ours is the transpose.
    let f_std = k2_inv.transpose() * essential * k1_inv;
    FundamentalMatrix::new(f_std.transpose()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pure_horizontal_translation_f() -> FundamentalMatrix {
        FundamentalMatrix::new(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0))
            .unwrap()
    }

    #[test]
    fn epipolar_line_pure_translation() {
        let f = pure_horizontal_translation_f();
        let l = f.epipolar_line(Point2::new(3.0, 7.0)).unwrap();
        // Horizontal line y = 7 (sign of the unit normal is not canonical).
        assert!(l.a.abs() < 1e-12);
        assert!((l.b.abs() - 1.0).abs() < 1e-12);
        assert!((l.c / l.b + 7.0).abs() < 1e-12);
        assert!(l.eval(Point2::new(100.0, 7.0)).abs() < 1e-12);
    }

    #[test]
    fn epipolar_line_unit_normal_gives_distance() {
        let f = pure_horizontal_translation_f();
        let l = f.epipolar_line(Point2::new(3.0, 7.0)).unwrap();
        let d = 4.2;
        assert!((l.eval(Point2::new(0.0, 7.0 + d)).abs() - d).abs() < 1e-12);
    }

    #[test]
    fn epipolar_line_scale_invariant() {
        let raw = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let f1 = FundamentalMatrix::new(raw).unwrap();
        let f2 = FundamentalMatrix::new(raw * 5.0).unwrap();
        let p = Point2::new(3.0, 7.0);
        let (l1, l2) = (f1.epipolar_line(p).unwrap(), f2.epipolar_line(p).unwrap());
        assert!((l1.a - l2.a).abs() < 1e-12);
        assert!((l1.b - l2.b).abs() < 1e-12);
        assert!((l1.c - l2.c).abs() < 1e-12);
    }

    #[test]
    fn estimate_rejects_insufficient() {
        let matches: Vec<_> = (0..7)
            .map(|i| {
                Correspondence::new(
                    Point2::new(i as f64, 2.0 * i as f64),
                    Point2::new(i as f64 + 1.0, 2.0 * i as f64),
                )
            })
            .collect();
        assert!(matches!(
            estimate_fundamental(&matches, &RansacConfig::default()),
            Err(GeometryError::InsufficientMatches(7))
        ));
    }

    #[test]
    fn predict_box_pure_translation_keeps_box() {
        // Horizontal epipolar lines pin top/bottom at the old heights; the
        // left/right translation direction is free and the regularizer keeps
        // it at the previous box.
        let f = pure_horizontal_translation_f();
        let b = BoundingBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let p = predict_box(&b, &f, 1e-6).unwrap();
        assert!((p.cx - 10.0).abs() < 1e-6);
        assert!((p.cy - 10.0).abs() < 1e-6);
        assert!((p.w - 4.0).abs() < 1e-6);
        assert!((p.h - 4.0).abs() < 1e-6);
    }

    #[test]
    fn predict_box_rank_deficient_without_regularizer() {
        let f = pure_horizontal_translation_f();
        let b = BoundingBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        assert!(matches!(
            predict_box(&b, &f, 0.0),
            Err(GeometryError::RankDeficient)
        ));
    }

    #[test]
    fn predict_box_huge_regularizer_returns_input() {
        let f = pure_horizontal_translation_f();
        let b = BoundingBox::new(12.0, -3.0, 5.0, 2.0).unwrap();
        let p = predict_box(&b, &f, 1e12).unwrap();
        assert!((p.cx - b.cx).abs() < 1e-6);
        assert!((p.cy - b.cy).abs() < 1e-6);
        assert!((p.w - b.w).abs() < 1e-6);
        assert!((p.h - b.h).abs() < 1e-6);
    }

    #[test]
    fn fundamental_invariants_hold() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0);
        let f = FundamentalMatrix::new(m).unwrap();
        let svd = f.matrix().svd(false, false);
        assert!(svd.singular_values[2].abs() < 1e-12);
        assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
    }
}
