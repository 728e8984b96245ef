//! Frame-to-frame detection association producing tracklets: blended
//! IOU/appearance scores with optional epipolar motion compensation, optimal
//! bipartite matching with a score gate, and the occlusion-driven chain
//! break on appearance change.

use thiserror::Error;

use crate::assign::{max_score_assignment, refine_ties_lexicographic, Matrix};
use crate::cluster::Trajectory;
use crate::geometry::{predict_box, FundamentalMatrix};
use crate::types::{Detection, Tracklet};

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("undefined rate: no links were made (TP+FP = 0)")]
    NoLinks,
    #[error("undefined rate: ground truth contains no linkable pairs (TP+FN = 0)")]
    NoGroundTruthLinks,
}

#[derive(Debug, Clone)]
pub struct AssociationConfig {
    /// Gate on the blended score; pairs below it stay unassociated.
    pub theta_assoc: f64,
    /// Blend weight: score = lambda * IOU + (1 - lambda) * appearance.
    pub lambda_iou: f64,
    /// Occlusion break: terminate a chain when the cosine between the new
    /// feature and the chain's running mean falls below this.
    pub theta_app: f64,
    /// Use epipolar prediction of the previous box when a fundamental
    /// matrix is available for the frame pair.
    pub use_eg: bool,
    /// Tikhonov weight forwarded to the box prediction.
    pub reg_weight: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            theta_assoc: 0.6,
            lambda_iou: 0.5,
            theta_app: 0.5,
            use_eg: true,
            reg_weight: 1e-6,
        }
    }
}

/// Per-adjacent-frame-pair epipolar geometry: `fundamental` is present only
/// when estimation succeeded for frames (t, t+1).
#[derive(Debug, Clone)]
pub struct FramePair {
    pub t: usize,
    pub fundamental: Option<FundamentalMatrix>,
}

/// Blended IOU/appearance score for a detection pair in adjacent frames.
/// With a fundamental matrix present, the previous box is first moved onto
/// its epipolar prediction; a collapsed prediction falls back to the raw box.
pub fn association_score(
    d_t: &Detection,
    d_t1: &Detection,
    f: Option<&FundamentalMatrix>,
    cfg: &AssociationConfig,
) -> f64 {
    let pred = match f {
        Some(f) => predict_box(&d_t.bbox, f, cfg.reg_weight).unwrap_or(d_t.bbox),
        None => d_t.bbox,
    };
    let iou = pred.iou(&d_t1.bbox);
    // A degenerate (zero-norm) feature contributes no appearance evidence.
    let appearance = d_t.feature.cosine_similarity(&d_t1.feature).unwrap_or(0.0);
    cfg.lambda_iou * iou + (1.0 - cfg.lambda_iou) * appearance
}

/// One-to-one association between two consecutive frames: optimal bipartite
/// assignment maximizing the total blended score, then pairs scoring below
/// the gate are discarded. Deterministic; exact ties prefer low indices.
pub fn associate_frame(
    dets_t: &[Detection],
    dets_t1: &[Detection],
    f: Option<&FundamentalMatrix>,
    cfg: &AssociationConfig,
) -> Vec<(usize, usize)> {
    if dets_t.is_empty() || dets_t1.is_empty() {
        return Vec::new();
    }
    let scores = Matrix::from_fn(dets_t.len(), dets_t1.len(), |i, j| {
        association_score(&dets_t[i], &dets_t1[j], f, cfg)
    });
    let mut assignment = max_score_assignment(&scores);
    refine_ties_lexicographic(&mut assignment, &scores);
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .filter(|&(i, j)| scores.at(i, j) >= cfg.theta_assoc)
        .collect()
}

struct Chain {
    detections: Vec<Detection>,
    feature_sum: Vec<f64>,
    /// Index of the chain's newest detection within its frame's list.
    last_index: usize,
}

impl Chain {
    fn start(det: &Detection, index: usize) -> Self {
        Self {
            feature_sum: det.feature.0.clone(),
            detections: vec![det.clone()],
            last_index: index,
        }
    }

    fn mean_cosine(&self, det: &Detection) -> Option<f64> {
        let mean = crate::types::AppearanceFeature(
            self.feature_sum
                .iter()
                .map(|v| v / self.detections.len() as f64)
                .collect(),
        );
        mean.cosine_similarity(&det.feature).ok()
    }

    fn extend(&mut self, det: &Detection, index: usize) {
        for (s, v) in self.feature_sum.iter_mut().zip(&det.feature.0) {
            *s += v;
        }
        self.detections.push(det.clone());
        self.last_index = index;
    }
}

/// Chains per-frame associations into maximal runs. A chain additionally
/// terminates when the new detection's appearance departs from the chain's
/// running mean feature (cosine below `theta_app`), which handles occlusions
/// where the detector still fires; the detection then opens a fresh chain.
/// Every detection ends up in exactly one tracklet. Ids are assigned in
/// order of first frame, then leftmost center.
pub fn build_tracklets(
    frames: &[Vec<Detection>],
    fpairs: &[FramePair],
    cfg: &AssociationConfig,
) -> Vec<Tracklet> {
    let n = frames.len();
    let mut f_by_t: Vec<Option<&FundamentalMatrix>> = vec![None; n.saturating_sub(1)];
    if cfg.use_eg {
        for fp in fpairs {
            if fp.t + 1 < n {
                f_by_t[fp.t] = fp.fundamental.as_ref();
            }
        }
    }

    let mut finished: Vec<Vec<Detection>> = Vec::new();
    let mut active: Vec<Chain> = Vec::new();
    for (t, dets) in frames.iter().enumerate() {
        if t == 0 {
            active = dets
                .iter()
                .enumerate()
                .map(|(i, d)| Chain::start(d, i))
                .collect();
            continue;
        }
        let pairs = associate_frame(&frames[t - 1], dets, f_by_t[t - 1], cfg);
        let mut next_of = vec![None; frames[t - 1].len()];
        for (i, j) in pairs {
            next_of[i] = Some(j);
        }
        let mut consumed = vec![false; dets.len()];
        let mut next_active: Vec<Chain> = Vec::new();
        for mut chain in active.drain(..) {
            let mut extended = false;
            if let Some(j) = next_of[chain.last_index] {
                let det = &dets[j];
                // Occlusion rule: a matched detection whose appearance left
                // the chain's running mean still terminates the chain.
                let keeps_appearance = chain.mean_cosine(det).map_or(true, |c| c >= cfg.theta_app);
                if keeps_appearance {
                    chain.extend(det, j);
                    consumed[j] = true;
                    extended = true;
                }
            }
            if extended {
                next_active.push(chain);
            } else {
                finished.push(chain.detections);
            }
        }
        for (j, det) in dets.iter().enumerate() {
            if !consumed[j] {
                next_active.push(Chain::start(det, j));
            }
        }
        active = next_active;
    }
    finished.extend(active.into_iter().map(|c| c.detections));

    finished.sort_by(|a, b| {
        let ka = (a[0].frame, a[0].bbox.cx);
        let kb = (b[0].frame, b[0].bbox.cx);
        ka.partial_cmp(&kb).unwrap()
    });
    finished
        .into_iter()
        .enumerate()
        .map(|(id, dets)| Tracklet::new(id, dets).expect("chains are frame-consecutive"))
        .collect()
}

/// Link-level error rates of tracklet generation against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationErrorRates {
    pub fdr: f64,
    pub fnr: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

/// Evaluates the adjacent-frame links made by the tracklets. Detections are
/// identified with ground truth per frame by optimal IOU matching (gate
/// 0.5). A link is a true positive when both endpoints carry the same
/// identity; otherwise it is a false positive. A false negative is an
/// adjacent-frame ground-truth pair whose two detections are both present
/// but not linked.
pub fn association_errors(
    tracklets: &[Tracklet],
    gt: &[Trajectory],
) -> Result<AssociationErrorRates, AssocError> {
    const IOU_GATE: f64 = 0.5;

    let max_frame = tracklets
        .iter()
        .map(|t| t.end_frame())
        .chain(gt.iter().map(|g| g.end_frame()))
        .max()
        .unwrap_or(0);

    // Per frame: (tracklet index, detection) in deterministic order.
    let mut dets_at: Vec<Vec<(usize, &Detection)>> = vec![Vec::new(); max_frame + 1];
    for (ti, t) in tracklets.iter().enumerate() {
        for d in t.detections() {
            dets_at[d.frame].push((ti, d));
        }
    }
    let mut gt_at: Vec<Vec<(usize, &Detection)>> = vec![Vec::new(); max_frame + 1];
    for (gi, g) in gt.iter().enumerate() {
        for e in &g.entries {
            gt_at[e.detection.frame].push((gi, &e.detection));
        }
    }

    // identity[frame] maps detection order index -> matched gt index;
    // owner[frame][gt] -> tracklet holding gt's detection at that frame.
    let mut identity: Vec<Vec<Option<usize>>> = Vec::with_capacity(max_frame + 1);
    let mut owner: Vec<std::collections::BTreeMap<usize, usize>> = Vec::new();
    for frame in 0..=max_frame {
        let dets = &dets_at[frame];
        let gts = &gt_at[frame];
        let mut ids = vec![None; dets.len()];
        let mut own = std::collections::BTreeMap::new();
        if !dets.is_empty() && !gts.is_empty() {
            let scores = Matrix::from_fn(dets.len(), gts.len(), |i, j| {
                let iou = dets[i].1.bbox.iou(&gts[j].1.bbox);
                if iou >= IOU_GATE {
                    iou
                } else {
                    -1.0
                }
            });
            let mut assignment = max_score_assignment(&scores);
            refine_ties_lexicographic(&mut assignment, &scores);
            for (i, j) in assignment.iter().enumerate() {
                if let Some(j) = *j {
                    if scores.at(i, j) >= IOU_GATE {
                        ids[i] = Some(gts[j].0);
                        own.insert(gts[j].0, dets[i].0);
                    }
                }
            }
        }
        identity.push(ids);
        owner.push(own);
    }

    // Count links: consecutive detections within one tracklet.
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (ti, t) in tracklets.iter().enumerate() {
        for pair in t.detections().windows(2) {
            let id_a = lookup_identity(&identity, &dets_at, pair[0].frame, ti);
            let id_b = lookup_identity(&identity, &dets_at, pair[1].frame, ti);
            match (id_a, id_b) {
                (Some(a), Some(b)) if a == b => tp += 1,
                _ => fp += 1,
            }
        }
    }

    // Missed links: gt identity present (as a matched detection) in both
    // adjacent frames, but the two detections sit in different tracklets.
    let mut fn_count = 0usize;
    for (gi, g) in gt.iter().enumerate() {
        for pair in g.entries.windows(2) {
            let (ta, tb) = (pair[0].detection.frame, pair[1].detection.frame);
            if tb != ta + 1 {
                continue;
            }
            match (owner[ta].get(&gi), owner[tb].get(&gi)) {
                (Some(&oa), Some(&ob)) if oa == ob => {} // linked (counted as TP)
                (Some(_), Some(_)) => fn_count += 1,
                _ => {} // a detection is missing; not an association error
            }
        }
    }

    if tp + fp == 0 {
        return Err(AssocError::NoLinks);
    }
    if tp + fn_count == 0 {
        return Err(AssocError::NoGroundTruthLinks);
    }
    Ok(AssociationErrorRates {
        fdr: fp as f64 / (tp + fp) as f64,
        fnr: fn_count as f64 / (tp + fn_count) as f64,
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_count,
    })
}

fn lookup_identity(
    identity: &[Vec<Option<usize>>],
    dets_at: &[Vec<(usize, &Detection)>],
    frame: usize,
    tracklet: usize,
) -> Option<usize> {
    let pos = dets_at[frame].iter().position(|&(ti, _)| ti == tracklet)?;
    identity[frame][pos]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::TrajectoryEntry;
    use crate::geometry::{fundamental_from_cameras, Camera};
    use crate::types::{AppearanceFeature, BoundingBox};
    use nalgebra::{Matrix3, Vector3};

    fn det(frame: usize, cx: f64, cy: f64, feature: &[f64]) -> Detection {
        Detection {
            frame,
            bbox: BoundingBox::new(cx, cy, 10.0, 10.0).unwrap(),
            confidence: 1.0,
            feature: AppearanceFeature(feature.to_vec()),
        }
    }

    fn cfg_no_eg() -> AssociationConfig {
        AssociationConfig {
            use_eg: false,
            ..AssociationConfig::default()
        }
    }

    #[test]
    fn score_identical_is_one() {
        let a = det(0, 50.0, 50.0, &[1.0, 0.0]);
        let b = det(1, 50.0, 50.0, &[1.0, 0.0]);
        let s = association_score(&a, &b, None, &cfg_no_eg());
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_disjoint_orthogonal_is_zero() {
        let a = det(0, 0.0, 0.0, &[1.0, 0.0]);
        let b = det(1, 100.0, 100.0, &[0.0, 1.0]);
        let s = association_score(&a, &b, None, &cfg_no_eg());
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn score_eg_exact_shift_compensation() {
        // Camera motion that shifts every detection horizontally by delta.
        // The rank-2 matrix below produces the vertical epipolar line
        // x = p.x + delta for any point p, so the predicted box lands
        // exactly on its displaced detection: without EG the score sits at
        // the bare appearance term, with EG both terms max out.
        let delta = 15.0;
        let f = crate::geometry::FundamentalMatrix::new(Matrix3::new(
            0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -delta,
        ))
        .unwrap();
        let d_t = det(0, 10.0, 10.0, &[1.0, 0.0]);
        let d_t1 = det(1, 10.0 + delta, 10.0, &[1.0, 0.0]);
        assert_eq!(d_t.bbox.iou(&d_t1.bbox), 0.0);
        let cfg = AssociationConfig::default();
        let without = association_score(&d_t, &d_t1, None, &cfg);
        let with = association_score(&d_t, &d_t1, Some(&f), &cfg);
        assert!((without - 0.5).abs() < 1e-9, "without EG: {without}");
        assert!(with > 0.999, "with EG: {with}");
    }

    #[test]
    fn score_eg_compensates_camera_motion() {
        // A forward-moving, panning camera (dolly + turn) sweeps a static
        // object across the image so far that raw IOU dies. The epipolar
        // lines radiate from the focus of expansion while the pan flow is
        // horizontal, so the lines pin the displaced box and the epipolar
        // prediction recovers the match up to the perspective size change.
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let cam1 = Camera {
            k,
            r: Matrix3::identity(),
            c: Vector3::zeros(),
        };
        let theta: f64 = 0.08;
        let (s, c) = theta.sin_cos();
        let r2 = Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c);
        let cam2 = Camera {
            k,
            r: r2,
            c: Vector3::new(0.0, 0.0, 20.0),
        };
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();

        // Fronto-parallel rectangle at depth 800, off the image center.
        let corners3d = [
            Vector3::new(40.0, 5.0, 800.0),
            Vector3::new(80.0, 5.0, 800.0),
            Vector3::new(80.0, 35.0, 800.0),
            Vector3::new(40.0, 35.0, 800.0),
        ];
        let p1: Vec<_> = corners3d.iter().map(|x| cam1.project(x).unwrap()).collect();
        let p2: Vec<_> = corners3d.iter().map(|x| cam2.project(x).unwrap()).collect();
        let box1 = BoundingBox::from_corners(&[p1[0], p1[1], p1[2], p1[3]]).unwrap();
        let box2 = BoundingBox::new(
            (p2[0].x + p2[2].x) / 2.0,
            (p2[0].y + p2[2].y) / 2.0,
            p2[1].x - p2[0].x,
            (p2[2].y + p2[3].y) / 2.0 - (p2[0].y + p2[1].y) / 2.0,
        )
        .unwrap();
        assert_eq!(box1.iou(&box2), 0.0, "camera motion must defeat raw IOU");

        let feat = [0.6, 0.8];
        let d_t = Detection {
            frame: 0,
            bbox: box1,
            confidence: 1.0,
            feature: AppearanceFeature(feat.to_vec()),
        };
        let d_t1 = Detection {
            frame: 1,
            bbox: box2,
            confidence: 1.0,
            feature: AppearanceFeature(feat.to_vec()),
        };
        let cfg = AssociationConfig::default();
        let without = association_score(&d_t, &d_t1, None, &cfg);
        let with = association_score(&d_t, &d_t1, Some(&f), &cfg);
        assert!((without - 0.5).abs() < 1e-9, "without EG: {without}");
        assert!(
            with > cfg.theta_assoc + 0.2,
            "with EG the pair must clear the gate decisively: {with}"
        );
    }

    #[test]
    fn associate_gate() {
        let cfg = cfg_no_eg();
        // Identical boxes, identical features: score 1.0 >= 0.6.
        let a = vec![det(0, 50.0, 50.0, &[1.0, 0.0])];
        let b = vec![det(1, 50.0, 50.0, &[1.0, 0.0])];
        assert_eq!(associate_frame(&a, &b, None, &cfg), vec![(0, 0)]);
        // Disjoint boxes, moderately similar features: 0.5*0 + 0.5*0.6 < 0.6.
        let b2 = vec![det(1, 500.0, 50.0, &[0.8, 0.6])];
        assert!(associate_frame(&a, &b2, None, &cfg).is_empty());
    }

    #[test]
    fn associate_prefers_total_score() {
        let cfg = cfg_no_eg();
        // Crossed 2x2 with diagonal dominance through appearance.
        let a = vec![det(0, 50.0, 50.0, &[1.0, 0.0]), det(0, 56.0, 50.0, &[0.0, 1.0])];
        let b = vec![det(1, 50.0, 50.0, &[1.0, 0.0]), det(1, 56.0, 50.0, &[0.0, 1.0])];
        assert_eq!(associate_frame(&a, &b, None, &cfg), vec![(0, 0), (1, 1)]);
    }

    fn frames_single_target(n: usize) -> Vec<Vec<Detection>> {
        (0..n)
            .map(|t| vec![det(t, 50.0 + t as f64, 50.0, &[1.0, 0.0])])
            .collect()
    }

    #[test]
    fn build_tracklets_single_chain() {
        let frames = frames_single_target(10);
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        assert_eq!(tl.len(), 1);
        assert_eq!(tl[0].len(), 10);
        assert_eq!(tl[0].id, 0);
    }

    #[test]
    fn build_tracklets_gap_splits() {
        let mut frames = frames_single_target(10);
        frames[4].clear();
        frames[5].clear();
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        assert_eq!(tl.len(), 2);
        assert_eq!((tl[0].start_frame(), tl[0].end_frame()), (0, 3));
        assert_eq!((tl[1].start_frame(), tl[1].end_frame()), (6, 9));
    }

    #[test]
    fn build_tracklets_appearance_flip_splits() {
        // Boxes keep overlapping, but the feature flips to an orthogonal
        // vector at frame 5: the running-mean cosine drops to ~0 < 0.5.
        let mut frames = frames_single_target(10);
        for t in 5..10 {
            frames[t][0].feature = AppearanceFeature(vec![0.0, 1.0]);
        }
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        assert_eq!(tl.len(), 2);
        assert_eq!((tl[0].start_frame(), tl[0].end_frame()), (0, 4));
        assert_eq!((tl[1].start_frame(), tl[1].end_frame()), (5, 9));
    }

    #[test]
    fn build_tracklets_partitions_detections() {
        // Two targets plus a spurious detection; everything must be covered
        // exactly once.
        let mut frames: Vec<Vec<Detection>> = (0..6)
            .map(|t| {
                vec![
                    det(t, 50.0 + t as f64, 50.0, &[1.0, 0.0]),
                    det(t, 150.0 - t as f64, 80.0, &[0.0, 1.0]),
                ]
            })
            .collect();
        frames[3].push(det(3, 300.0, 10.0, &[0.7, 0.7]));
        let total: usize = frames.iter().map(|f| f.len()).sum();
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        let covered: usize = tl.iter().map(|t| t.len()).sum();
        assert_eq!(covered, total);
        // Ids ordered by (first frame, cx).
        for pair in tl.windows(2) {
            let ka = (pair[0].start_frame(), pair[0].first().bbox.cx);
            let kb = (pair[1].start_frame(), pair[1].first().bbox.cx);
            assert!(ka <= kb);
        }
    }

    fn gt_from_frames(frames: &[Vec<Detection>], which: usize) -> Trajectory {
        Trajectory {
            object_id: which as i64 + 1,
            entries: frames
                .iter()
                .filter_map(|f| f.get(which))
                .map(|d| TrajectoryEntry {
                    detection: d.clone(),
                    interpolated: false,
                })
                .collect(),
        }
    }

    #[test]
    fn association_errors_perfect() {
        let frames = frames_single_target(10);
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        let gt = vec![gt_from_frames(&frames, 0)];
        let rates = association_errors(&tl, &gt).unwrap();
        assert_eq!(rates.fdr, 0.0);
        assert_eq!(rates.fnr, 0.0);
        assert_eq!(rates.true_positive, 9);
    }

    #[test]
    fn association_errors_counts_missed_links() {
        let frames = frames_single_target(10);
        let gt = vec![gt_from_frames(&frames, 0)];
        // Break the chain manually into [0..4] and [5..9]: one missed link.
        let t0 = Tracklet::new(0, frames[..5].iter().map(|f| f[0].clone()).collect()).unwrap();
        let t1 = Tracklet::new(1, frames[5..].iter().map(|f| f[0].clone()).collect()).unwrap();
        let rates = association_errors(&[t0, t1], &gt).unwrap();
        assert_eq!(rates.true_positive, 8);
        assert_eq!(rates.false_negative, 1);
        assert!((rates.fnr - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(rates.fdr, 0.0);
    }

    #[test]
    fn association_errors_counts_wrong_links() {
        // Two coexisting targets; hand-build tracklets that swap identities
        // at frame 5, producing two wrong links.
        let frames: Vec<Vec<Detection>> = (0..10)
            .map(|t| {
                vec![
                    det(t, 50.0, 50.0, &[1.0, 0.0]),
                    det(t, 150.0, 80.0, &[0.0, 1.0]),
                ]
            })
            .collect();
        let gt = vec![gt_from_frames(&frames, 0), gt_from_frames(&frames, 1)];
        let mut a: Vec<Detection> = frames[..5].iter().map(|f| f[0].clone()).collect();
        a.extend(frames[5..].iter().map(|f| f[1].clone()));
        let mut b: Vec<Detection> = frames[..5].iter().map(|f| f[1].clone()).collect();
        b.extend(frames[5..].iter().map(|f| f[0].clone()));
        let tl = vec![Tracklet::new(0, a).unwrap(), Tracklet::new(1, b).unwrap()];
        let rates = association_errors(&tl, &gt).unwrap();
        assert_eq!(rates.false_positive, 2);
        assert_eq!(rates.true_positive, 16);
        assert!((rates.fdr - 2.0 / 18.0).abs() < 1e-12);
        // The same-identity pairs across frame 4-5 are present but unlinked.
        assert_eq!(rates.false_negative, 2);
    }

    #[test]
    fn association_errors_undefined_cases() {
        // Single-detection tracklets make no links at all.
        let frames = frames_single_target(1);
        let tl = build_tracklets(&frames, &[], &cfg_no_eg());
        let gt = vec![gt_from_frames(&frames, 0)];
        assert!(matches!(
            association_errors(&tl, &gt),
            Err(AssocError::NoLinks)
        ));
    }
}
