//! Training-data augmentations: relative bounding-box randomization and
//! random splitting of a trajectory into tracklets.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::cluster::Trajectory;
use crate::types::{Detection, Tracklet};

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Standard deviation of the relative box disturbance.
    pub box_noise_sigma: f64,
    /// Per-frame probability of marking a breaking frame.
    pub break_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            box_noise_sigma: 0.05,
            break_prob: 0.1,
            seed: 0,
        }
    }
}

/// Disturbs location relative to size and size multiplicatively, with four
/// independent N(0, sigma^2) draws: cx += a1*w, cy += a2*h, w *= 1+a3,
/// h *= 1+a4. Width and height are clamped to stay positive.
pub fn augment_box(d: &Detection, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Detection {
    if cfg.box_noise_sigma <= 0.0 {
        return d.clone();
    }
    let normal = Normal::new(0.0, cfg.box_noise_sigma).expect("sigma is positive");
    let a1 = normal.sample(rng);
    let a2 = normal.sample(rng);
    let a3 = normal.sample(rng);
    let a4 = normal.sample(rng);
    let mut out = d.clone();
    out.bbox.cx += a1 * d.bbox.w;
    out.bbox.cy += a2 * d.bbox.h;
    out.bbox.w = (d.bbox.w * (1.0 + a3)).max(1e-6);
    out.bbox.h = (d.bbox.h * (1.0 + a4)).max(1e-6);
    out
}

/// Splits a trajectory into tracklets: one uniform draw per entry marks
/// breaking frames (a mark on the first entry is a no-op), and frame
/// discontinuities in the trajectory always force a split since tracklets
/// are frame-consecutive. Concatenating the outputs reproduces the input.
pub fn split_trajectory(
    traj: &Trajectory,
    cfg: &AugmentConfig,
    rng: &mut dyn RngCore,
) -> Vec<Tracklet> {
    let mut out = Vec::new();
    let mut current: Vec<Detection> = Vec::new();
    let mut next_id = 0usize;
    let flush = |current: &mut Vec<Detection>, out: &mut Vec<Tracklet>, next_id: &mut usize| {
        if !current.is_empty() {
            let dets = std::mem::take(current);
            out.push(Tracklet::new(*next_id, dets).expect("consecutive run"));
            *next_id += 1;
        }
    };
    for entry in &traj.entries {
        let u = uniform01(rng);
        let breaking = u < cfg.break_prob;
        let discontinuous = current
            .last()
            .is_some_and(|prev| entry.detection.frame != prev.frame + 1);
        if breaking || discontinuous {
            flush(&mut current, &mut out, &mut next_id);
        }
        current.push(entry.detection.clone());
    }
    flush(&mut current, &mut out, &mut next_id);
    out
}

/// Uniform draw in [0, 1) from the top 53 bits, stable across platforms.
fn uniform01(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}
