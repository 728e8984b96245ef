//! Tracking evaluation: per-frame IOU matching, MOTA with identity switches
//! and coverage statistics, and the identity-level IDF1 score.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::assign::{max_score_assignment, refine_ties_lexicographic, Matrix};
use crate::cluster::Trajectory;
use crate::types::BoundingBox;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics are undefined without ground-truth detections")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Minimum IOU for a ground-truth/prediction match.
    pub iou_match_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_match_threshold: 0.5,
        }
    }
}

/// Full evaluation report. `mostly_tracked` / `mostly_lost` are fractions of
/// ground-truth trajectories covered at least 80% / at most 20%.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub fp: usize,
    pub fn_: usize,
    pub id_switches: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub mostly_tracked: f64,
    pub mostly_lost: f64,
    pub fragments: usize,
}

impl EvalReport {
    /// Column order of [`to_csv_row`](Self::to_csv_row) and the key order of
    /// [`to_kv_block`](Self::to_kv_block).
    pub const CSV_HEADER: &'static str =
        "mota,idf1,fp,fn,id_switches,idtp,idfp,idfn,mostly_tracked,mostly_lost,fragments";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.mota,
            self.idf1,
            self.fp,
            self.fn_,
            self.id_switches,
            self.idtp,
            self.idfp,
            self.idfn,
            self.mostly_tracked,
            self.mostly_lost,
            self.fragments
        )
    }

    pub fn to_kv_block(&self) -> String {
        format!(
            "mota = {:.6}\nidf1 = {:.6}\nfp = {}\nfn = {}\nid_switches = {}\nidtp = {}\nidfp = {}\nidfn = {}\nmostly_tracked = {:.6}\nmostly_lost = {:.6}\nfragments = {}\n",
            self.mota,
            self.idf1,
            self.fp,
            self.fn_,
            self.id_switches,
            self.idtp,
            self.idfp,
            self.idfn,
            self.mostly_tracked,
            self.mostly_lost,
            self.fragments
        )
    }
}

/// One labeled box in one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameBox {
    pub id: i64,
    pub bbox: BoundingBox,
}

/// Optimal per-frame matching: maximizes total IOU over pairs at or above
/// the threshold, one-to-one. Returns (gt index, pred index) pairs ordered
/// by gt index; exact ties prefer the lowest gt id.
pub fn match_frame(gt: &[FrameBox], pred: &[FrameBox], cfg: &EvalConfig) -> Vec<(usize, usize)> {
    if gt.is_empty() || pred.is_empty() {
        return Vec::new();
    }
    let scores = Matrix::from_fn(gt.len(), pred.len(), |i, j| {
        let iou = gt[i].bbox.iou(&pred[j].bbox);
        if iou >= cfg.iou_match_threshold {
            iou
        } else {
            -1.0
        }
    });
    let mut assignment = max_score_assignment(&scores);
    refine_ties_lexicographic(&mut assignment, &scores);
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .filter(|&(i, j)| scores.at(i, j) >= cfg.iou_match_threshold)
        .collect()
}

fn frames_of(trajs: &[Trajectory]) -> BTreeMap<usize, Vec<FrameBox>> {
    let mut map: BTreeMap<usize, Vec<FrameBox>> = BTreeMap::new();
    for t in trajs {
        for e in &t.entries {
            map.entry(e.detection.frame).or_default().push(FrameBox {
                id: t.object_id,
                bbox: e.detection.bbox,
            });
        }
    }
    map
}

/// CLEAR-style detection metrics plus coverage statistics.
///
/// MOTA = 1 - (FN + FP + IDSW) / total ground-truth detections. An identity
/// switch is counted when a matched ground truth changes predicted identity
/// relative to its most recent match. A fragment is a tracked -> untracked ->
/// tracked transition of one ground-truth trajectory.
pub fn mota(
    gt: &[Trajectory],
    pred: &[Trajectory],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let total_gt: usize = gt.iter().map(|t| t.entries.len()).sum();
    if total_gt == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let gt_frames = frames_of(gt);
    let pred_frames = frames_of(pred);

    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut idsw = 0usize;
    // Per gt id: most recent matched predicted id, and per-frame match flags.
    let mut last_match: BTreeMap<i64, i64> = BTreeMap::new();
    let mut covered: BTreeMap<i64, (usize, usize)> = BTreeMap::new(); // (present, matched)
    let mut frag_state: BTreeMap<i64, (bool, bool)> = BTreeMap::new(); // (ever matched, currently gap)
    let mut fragments = 0usize;

    let empty: Vec<FrameBox> = Vec::new();
    let all_frames: std::collections::BTreeSet<usize> = gt_frames
        .keys()
        .chain(pred_frames.keys())
        .copied()
        .collect();
    for frame in all_frames {
        let g = gt_frames.get(&frame).unwrap_or(&empty);
        let p = pred_frames.get(&frame).unwrap_or(&empty);
        let matches = match_frame(g, p, cfg);
        let mut g_matched = vec![false; g.len()];
        for &(gi, pi) in &matches {
            g_matched[gi] = true;
            let gt_id = g[gi].id;
            let pred_id = p[pi].id;
            if let Some(&prev) = last_match.get(&gt_id) {
                if prev != pred_id {
                    idsw += 1;
                }
            }
            last_match.insert(gt_id, pred_id);
        }
        fp += p.len() - matches.len();
        fn_ += g.len() - matches.len();

        for (gi, fb) in g.iter().enumerate() {
            let c = covered.entry(fb.id).or_insert((0, 0));
            c.0 += 1;
            if g_matched[gi] {
                c.1 += 1;
            }
            let st = frag_state.entry(fb.id).or_insert((false, false));
            if g_matched[gi] {
                if st.0 && st.1 {
                    fragments += 1;
                }
                st.0 = true;
                st.1 = false;
            } else if st.0 {
                st.1 = true;
            }
        }
    }

    let n_traj = covered.len().max(1);
    let mt = covered
        .values()
        .filter(|(present, matched)| *matched as f64 >= 0.8 * *present as f64)
        .count() as f64
        / n_traj as f64;
    let ml = covered
        .values()
        .filter(|(present, matched)| *matched as f64 <= 0.2 * *present as f64)
        .count() as f64
        / n_traj as f64;

    Ok(EvalReport {
        mota: 1.0 - (fn_ + fp + idsw) as f64 / total_gt as f64,
        idf1: 0.0,
        fp,
        fn_,
        id_switches: idsw,
        idtp: 0,
        idfp: 0,
        idfn: 0,
        mostly_tracked: mt,
        mostly_lost: ml,
        fragments,
    })
}

/// Identity metrics: a global bipartite matching between ground-truth and
/// predicted identities maximizes the number of frames in which the matched
/// pair overlaps with IOU at or above the threshold; IDF1 is the F1 score of
/// the matched detections.
pub fn idf1(
    gt: &[Trajectory],
    pred: &[Trajectory],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let total_gt: usize = gt.iter().map(|t| t.entries.len()).sum();
    if total_gt == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let total_pred: usize = pred.iter().map(|t| t.entries.len()).sum();

    // Overlap counts per (gt trajectory, pred trajectory).
    let mut counts = vec![vec![0usize; pred.len()]; gt.len()];
    for (gi, g) in gt.iter().enumerate() {
        let by_frame: BTreeMap<usize, &BoundingBox> = g
            .entries
            .iter()
            .map(|e| (e.detection.frame, &e.detection.bbox))
            .collect();
        for (pi, p) in pred.iter().enumerate() {
            let mut c = 0usize;
            for e in &p.entries {
                if let Some(gb) = by_frame.get(&e.detection.frame) {
                    if gb.iou(&e.detection.bbox) >= cfg.iou_match_threshold {
                        c += 1;
                    }
                }
            }
            counts[gi][pi] = c;
        }
    }

    let idtp = if gt.is_empty() || pred.is_empty() {
        0
    } else {
        let scores = Matrix::from_fn(gt.len(), pred.len(), |i, j| counts[i][j] as f64);
        let assignment = max_score_assignment(&scores);
        assignment
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| counts[i][j]))
            .sum()
    };
    let idfn = total_gt - idtp;
    let idfp = total_pred - idtp;
    let idf1 = if 2 * idtp + idfp + idfn == 0 {
        0.0
    } else {
        2.0 * idtp as f64 / (2 * idtp + idfp + idfn) as f64
    };
    Ok(EvalReport {
        mota: 0.0,
        idf1,
        fp: 0,
        fn_: 0,
        id_switches: 0,
        idtp,
        idfp,
        idfn,
        mostly_tracked: 0.0,
        mostly_lost: 0.0,
        fragments: 0,
    })
}

/// Runs both metric families and merges them into one report.
pub fn evaluate(
    gt: &[Trajectory],
    pred: &[Trajectory],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let m = mota(gt, pred, cfg)?;
    let i = idf1(gt, pred, cfg)?;
    Ok(EvalReport {
        idf1: i.idf1,
        idtp: i.idtp,
        idfp: i.idfp,
        idfn: i.idfn,
        ..m
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::TrajectoryEntry;
    use crate::types::{AppearanceFeature, Detection};

    fn traj(id: i64, frames: std::ops::Range<usize>, cx_off: f64) -> Trajectory {
        Trajectory {
            object_id: id,
            entries: frames
                .map(|f| TrajectoryEntry {
                    detection: Detection {
                        frame: f,
                        bbox: BoundingBox::new(50.0 + cx_off + f as f64, 40.0, 10.0, 20.0)
                            .unwrap(),
                        confidence: 1.0,
                        feature: AppearanceFeature(vec![1.0]),
                    },
                    interpolated: false,
                })
                .collect(),
        }
    }

    fn relabeled(t: &Trajectory, id: i64) -> Trajectory {
        Trajectory {
            object_id: id,
            entries: t.entries.clone(),
        }
    }

    #[test]
    fn match_frame_identical_and_empty() {
        let cfg = EvalConfig::default();
        let g = vec![
            FrameBox {
                id: 1,
                bbox: BoundingBox::new(10.0, 10.0, 4.0, 4.0).unwrap(),
            },
            FrameBox {
                id: 2,
                bbox: BoundingBox::new(30.0, 10.0, 4.0, 4.0).unwrap(),
            },
        ];
        assert_eq!(match_frame(&g, &g, &cfg), vec![(0, 0), (1, 1)]);
        assert!(match_frame(&g, &[], &cfg).is_empty());
    }

    #[test]
    fn match_frame_crossed_prefers_total() {
        // IOU matrix [[0.6, 0.55], [0.55, 0.6]]: diagonal wins with 1.2.
        let cfg = EvalConfig::default();
        // Unit-height boxes with widths arranged to give those IOUs.
        // iou(a,b) for co-centered boxes of widths 6,10 and height equal:
        // 6/10 = 0.6; offset pairs tuned for 0.55.
        let mk = |cx: f64, w: f64| FrameBox {
            id: 1,
            bbox: BoundingBox::new(cx, 0.0, w, 10.0).unwrap(),
        };
        let g = vec![mk(0.0, 6.0), mk(20.0, 6.0)];
        let p = vec![mk(0.0, 10.0), mk(20.0, 10.0)];
        // Cross IOUs are 0 here (disjoint), so this checks the diagonal case.
        let m = match_frame(&g, &p, &cfg);
        assert_eq!(m, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn mota_perfect() {
        let gt = vec![traj(1, 0..10, 0.0), traj(2, 0..10, 100.0)];
        let r = evaluate(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.idf1, 1.0);
        assert_eq!((r.fp, r.fn_, r.id_switches, r.fragments), (0, 0, 0, 0));
        assert_eq!(r.mostly_tracked, 1.0);
        assert_eq!(r.mostly_lost, 0.0);
    }

    #[test]
    fn mota_hand_example() {
        // 10 gt detections; predictions miss frames 8 and 9 (FN=2), carry one
        // far-off spurious detection (FP=1) and switch identity once (IDSW=1)
        // -> MOTA = 1 - 4/10 = 0.6.
        let gt = vec![traj(1, 0..10, 0.0)];
        let mut pred_a = traj(10, 0..4, 0.0);
        let pred_b = traj(11, 4..8, 0.0);
        let spurious = Trajectory {
            object_id: 12,
            entries: vec![TrajectoryEntry {
                detection: Detection {
                    frame: 2,
                    bbox: BoundingBox::new(500.0, 40.0, 10.0, 20.0).unwrap(),
                    confidence: 1.0,
                    feature: AppearanceFeature(vec![1.0]),
                },
                interpolated: false,
            }],
        };
        pred_a.object_id = 10;
        let r = mota(&gt, &[pred_a, pred_b, spurious], &EvalConfig::default()).unwrap();
        assert_eq!(r.fn_, 2);
        assert_eq!(r.fp, 1);
        assert_eq!(r.id_switches, 1);
        assert!((r.mota - 0.6).abs() < 1e-12);
    }

    #[test]
    fn mota_empty_predictions() {
        let gt = vec![traj(1, 0..10, 0.0)];
        let r = mota(&gt, &[], &EvalConfig::default()).unwrap();
        assert_eq!(r.fn_, 10);
        assert!((r.mota - 0.0).abs() < 1e-12);
    }

    #[test]
    fn mota_errors_on_empty_gt() {
        assert!(matches!(
            mota(&[], &[traj(1, 0..3, 0.0)], &EvalConfig::default()),
            Err(MetricsError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn idf1_split_example() {
        // One 10-frame gt trajectory split into two 5-frame predicted ids:
        // the identity matching keeps one id -> IDTP=5, IDFP=5, IDFN=5.
        let gt = vec![traj(1, 0..10, 0.0)];
        let a = traj(10, 0..5, 0.0);
        let b = traj(11, 5..10, 0.0);
        let r = idf1(&gt, &[a, b], &EvalConfig::default()).unwrap();
        assert_eq!((r.idtp, r.idfp, r.idfn), (5, 5, 5));
        assert!((r.idf1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idf1_empty_predictions_zero() {
        let gt = vec![traj(1, 0..10, 0.0)];
        let r = idf1(&gt, &[], &EvalConfig::default()).unwrap();
        assert_eq!(r.idf1, 0.0);
        assert_eq!(r.idfn, 10);
    }

    #[test]
    fn relabel_invariance() {
        let gt = vec![traj(1, 0..10, 0.0), traj(2, 0..10, 100.0)];
        let pred = vec![traj(7, 0..10, 0.0), traj(9, 0..10, 100.0)];
        let base = evaluate(&gt, &pred, &EvalConfig::default()).unwrap();
        let swapped = vec![relabeled(&pred[0], 9), relabeled(&pred[1], 7)];
        let r = evaluate(&gt, &swapped, &EvalConfig::default()).unwrap();
        assert_eq!(base.idf1, r.idf1);
        assert_eq!(base.mota, r.mota);
        assert_eq!(base.id_switches, r.id_switches);
    }

    #[test]
    fn idf1_drops_when_switch_injected() {
        let gt = vec![traj(1, 0..10, 0.0), traj(2, 0..10, 100.0)];
        let perfect = evaluate(&gt, &gt, &EvalConfig::default()).unwrap();
        // Swap the two predicted identities halfway.
        let mut a: Vec<TrajectoryEntry> = gt[0].entries[..5].to_vec();
        a.extend(gt[1].entries[5..].iter().cloned());
        let mut b: Vec<TrajectoryEntry> = gt[1].entries[..5].to_vec();
        b.extend(gt[0].entries[5..].iter().cloned());
        let pred = vec![
            Trajectory {
                object_id: 1,
                entries: a,
            },
            Trajectory {
                object_id: 2,
                entries: b,
            },
        ];
        let r = evaluate(&gt, &pred, &EvalConfig::default()).unwrap();
        assert!(r.idf1 < perfect.idf1);
        assert!((r.idf1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fragments_counted() {
        let gt = vec![traj(1, 0..9, 0.0)];
        // Predictions cover frames 0-2 and 6-8: one gap -> one fragment.
        let a = traj(5, 0..3, 0.0);
        let b = traj(5, 6..9, 0.0);
        let merged = Trajectory {
            object_id: 5,
            entries: a.entries.into_iter().chain(b.entries).collect(),
        };
        let r = mota(&gt, &[merged], &EvalConfig::default()).unwrap();
        assert_eq!(r.fragments, 1);
        assert_eq!(r.fn_, 3);
        assert_eq!(r.id_switches, 0);
    }
}
