//! Training: Adam with a step-decayed learning rate, balanced
//! positive/negative batches, and a tracklet-pair sampler that applies the
//! two augmentations (box randomization, random trajectory splitting) to
//! ground-truth trajectories.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::augment::{augment_box, split_trajectory, AugmentConfig};
use super::model::{init_weights, loss_and_gradient, NetGrads, NetWeights};
use super::{assemble_input, InputTensor, NetConfig, NetError};
use crate::cluster::Trajectory;
use crate::types::{AppearanceFeature, Detection, FrameMeta, Tracklet};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_initial: 1e-3,
            lr_decay_every: 2000,
            lr_decay_factor: 0.1,
            lr_floor: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 3000,
            seed: 0,
        }
    }
}

/// Step-decay schedule: `lr_initial * factor^(step / every)` with a floor.
pub fn learning_rate(step: usize, cfg: &TrainConfig) -> f64 {
    let decays = (step / cfg.lr_decay_every) as i32;
    (cfg.lr_initial * cfg.lr_decay_factor.powi(decays)).max(cfg.lr_floor)
}

/// Source of labeled training pairs. `positive` requests a same-object pair.
pub trait PairSampler {
    fn sample(&mut self, positive: bool, rng: &mut dyn RngCore) -> Option<InputTensor>;
}

#[derive(Debug)]
pub struct TrainReport {
    pub weights: NetWeights,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Runs Adam for `tcfg.steps` steps over balanced batches drawn from the
/// sampler. Weight init, batch sampling and updates are all seeded, so equal
/// seeds give bit-identical weights.
pub fn train(
    sampler: &mut dyn PairSampler,
    tcfg: &TrainConfig,
    ncfg: &NetConfig,
) -> Result<TrainReport, NetError> {
    ncfg.validate()?;
    let mut weights = init_weights(ncfg);
    let mut m: Option<NetGrads> = None;
    let mut v: Option<NetGrads> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut losses = Vec::with_capacity(tcfg.steps);

    let n_pos = tcfg.batch_size - tcfg.batch_size / 2;
    let n_neg = tcfg.batch_size / 2;

    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..n_pos {
            let x = sampler
                .sample(true, &mut rng)
                .ok_or(NetError::SamplerExhausted)?;
            batch.push((x, 1.0));
        }
        for _ in 0..n_neg {
            let x = sampler
                .sample(false, &mut rng)
                .ok_or(NetError::SamplerExhausted)?;
            batch.push((x, 0.0));
        }

        let (loss, grads) = loss_and_gradient(&batch, &weights, ncfg)?;
        losses.push(loss);

        let mm = m.get_or_insert_with(|| NetGrads::zeros_like(&weights));
        let vv = v.get_or_insert_with(|| NetGrads::zeros_like(&weights));
        let lr = learning_rate(step, tcfg);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - tcfg.adam_beta1.powi(t);
        let bc2 = 1.0 - tcfg.adam_beta2.powi(t);
        let mut tensors = weights.tensors_mut();
        for (ti, tensor) in tensors.iter_mut().enumerate() {
            let g = &grads.tensors[ti];
            let m_t = &mut mm.tensors[ti];
            let v_t = &mut vv.tensors[ti];
            for j in 0..tensor.len() {
                m_t[j] = tcfg.adam_beta1 * m_t[j] + (1.0 - tcfg.adam_beta1) * g[j];
                v_t[j] = tcfg.adam_beta2 * v_t[j] + (1.0 - tcfg.adam_beta2) * g[j] * g[j];
                let m_hat = m_t[j] / bc1;
                let v_hat = v_t[j] / bc2;
                let updated = tensor[j] as f64 - lr * m_hat / (v_hat.sqrt() + tcfg.adam_eps);
                tensor[j] = updated as f32;
            }
        }
    }

    Ok(TrainReport { weights, losses })
}

/// Draws tracklet pairs from ground-truth trajectories with the two
/// augmentations: every box is jittered relative to its size, and each
/// trajectory is broken into random tracklets before two pieces are picked.
/// Positive pairs come from one trajectory, negative pairs from two, both
/// restricted to non-overlapping pieces within the network's time window.
/// Optional feature noise (applied before renormalization) mirrors the
/// detector noise the network will see at inference time.
pub struct TrajectoryPairSampler {
    trajectories: Vec<Trajectory>,
    meta: FrameMeta,
    net_cfg: NetConfig,
    augment_cfg: AugmentConfig,
    feature_noise_sigma: f64,
    max_attempts: usize,
}

impl TrajectoryPairSampler {
    pub fn new(
        trajectories: Vec<Trajectory>,
        meta: FrameMeta,
        net_cfg: NetConfig,
        augment_cfg: AugmentConfig,
        feature_noise_sigma: f64,
    ) -> Self {
        Self {
            trajectories,
            meta,
            net_cfg,
            augment_cfg,
            feature_noise_sigma,
            max_attempts: 200,
        }
    }

    fn noisy_feature(&self, f: &AppearanceFeature, rng: &mut dyn RngCore) -> AppearanceFeature {
        if self.feature_noise_sigma <= 0.0 {
            return f.clone();
        }
        let normal = Normal::new(0.0, self.feature_noise_sigma).expect("sigma validated");
        let mut v: Vec<f64> = f.0.iter().map(|x| x + normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        AppearanceFeature(v)
    }

    /// Augmented tracklet pieces of one trajectory.
    fn pieces(&self, traj_idx: usize, rng: &mut dyn RngCore) -> Vec<Tracklet> {
        let traj = &self.trajectories[traj_idx];
        let augmented: Vec<Detection> = traj
            .entries
            .iter()
            .map(|e| {
                let mut d = augment_box(&e.detection, &self.augment_cfg, rng);
                d.feature = self.noisy_feature(&d.feature, rng);
                d
            })
            .collect();
        let shadow = Trajectory {
            object_id: traj.object_id,
            entries: augmented
                .into_iter()
                .map(|detection| crate::cluster::TrajectoryEntry {
                    detection,
                    interpolated: false,
                })
                .collect(),
        };
        split_trajectory(&shadow, &self.augment_cfg, rng)
    }

    /// All ordered piece pairs (a ends before b starts, gap within window).
    fn eligible_pairs(&self, a: &[Tracklet], b: &[Tracklet], cross: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, u) in a.iter().enumerate() {
            for (j, w) in b.iter().enumerate() {
                if !cross && i == j {
                    continue;
                }
                let (first, second) = if u.start_frame() <= w.start_frame() {
                    (u, w)
                } else {
                    (w, u)
                };
                if first.time_overlap(second) {
                    continue;
                }
                if first.time_gap(second) <= self.net_cfg.t_window {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

impl PairSampler for TrajectoryPairSampler {
    fn sample(&mut self, positive: bool, rng: &mut dyn RngCore) -> Option<InputTensor> {
        if self.trajectories.is_empty() || (!positive && self.trajectories.len() < 2) {
            return None;
        }
        for _ in 0..self.max_attempts {
            if positive {
                let ti = rng.random_range(0..self.trajectories.len());
                let pieces = self.pieces(ti, rng);
                if pieces.len() < 2 {
                    continue;
                }
                let pairs = self.eligible_pairs(&pieces, &pieces, false);
                if pairs.is_empty() {
                    continue;
                }
                let (i, j) = pairs[rng.random_range(0..pairs.len())];
                let (u, w) = if pieces[i].start_frame() <= pieces[j].start_frame() {
                    (&pieces[i], &pieces[j])
                } else {
                    (&pieces[j], &pieces[i])
                };
                if let Ok(x) = assemble_input(u, w, &self.meta, &self.net_cfg) {
                    return Some(x);
                }
            } else {
                let ti = rng.random_range(0..self.trajectories.len());
                let mut tj = rng.random_range(0..self.trajectories.len() - 1);
                if tj >= ti {
                    tj += 1;
                }
                let pa = self.pieces(ti, rng);
                let pb = self.pieces(tj, rng);
                if pa.is_empty() || pb.is_empty() {
                    continue;
                }
                let pairs = self.eligible_pairs(&pa, &pb, true);
                if pairs.is_empty() {
                    continue;
                }
                let (i, j) = pairs[rng.random_range(0..pairs.len())];
                let (u, w) = if pa[i].start_frame() <= pb[j].start_frame() {
                    (&pa[i], &pb[j])
                } else {
                    (&pb[j], &pa[i])
                };
                if let Ok(x) = assemble_input(u, w, &self.meta, &self.net_cfg) {
                    return Some(x);
                }
            }
        }
        None
    }
}
