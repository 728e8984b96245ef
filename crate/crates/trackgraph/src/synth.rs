//! Deterministic synthetic sequences with full ground truth: moving targets
//! projected through a configurable camera path, corrupted detections with
//! appearance features, and static background correspondences with the true
//! fundamental matrix per frame pair.

use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::cluster::{Trajectory, TrajectoryEntry};
use crate::geometry::{fundamental_from_cameras, Camera, Correspondence, FundamentalMatrix};
use crate::types::{AppearanceFeature, BoundingBox, Detection, FrameMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not draw {targets} prototypes with pairwise |cos| <= {max_cos} in dimension {dim}; increase feature_dim")]
    PrototypeRejection {
        targets: usize,
        dim: usize,
        max_cos: f64,
    },
    #[error("scene config invalid: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraMode {
    Static,
    /// Forward dolly combined with a sinusoidal pan. The pan sweeps targets
    /// across the image while the forward baseline keeps the epipolar
    /// geometry informative for box prediction.
    Translating,
    /// Circular orbit around the scene center, gaze fixed on it.
    Orbiting,
}

/// Full occlusion of one target over an inclusive frame range: no ground
/// truth and no detections are emitted for it there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionEvent {
    pub target: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub n_targets: usize,
    pub n_frames: usize,
    pub frame: FrameMeta,
    /// Mean image-plane speed of targets, pixels per frame.
    pub target_speed_px: f64,
    pub detection_drop_prob: f64,
    /// Poisson rate of spurious detections per frame.
    pub false_positive_rate: f64,
    /// Relative box jitter applied to detections.
    pub box_jitter_sigma: f64,
    pub feature_dim: usize,
    /// Per-entry Gaussian noise added to detection features before
    /// renormalization.
    pub feature_noise_sigma: f64,
    pub camera_mode: CameraMode,
    pub n_background_points: usize,
    pub occlusion_events: Vec<OcclusionEvent>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_targets: 3,
            n_frames: 80,
            frame: FrameMeta::new(960, 540, 30.0),
            target_speed_px: 2.5,
            detection_drop_prob: 0.0,
            false_positive_rate: 0.0,
            box_jitter_sigma: 0.0,
            feature_dim: 8,
            feature_noise_sigma: 0.0,
            camera_mode: CameraMode::Static,
            n_background_points: 120,
            occlusion_events: Vec::new(),
            seed: 1,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames < 2 {
            return Err(SynthError::Config("need at least 2 frames".into()));
        }
        if self.n_targets == 0 {
            return Err(SynthError::Config("need at least 1 target".into()));
        }
        for p in [self.detection_drop_prob, self.box_jitter_sigma, self.feature_noise_sigma] {
            if p < 0.0 {
                return Err(SynthError::Config("sigmas and probabilities must be >= 0".into()));
            }
        }
        if self.detection_drop_prob > 1.0 {
            return Err(SynthError::Config("drop probability must be <= 1".into()));
        }
        Ok(())
    }
}

/// A detection plus the identity that produced it (None for clutter).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDetection {
    pub detection: Detection,
    pub identity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub meta: FrameMeta,
    pub gt: Vec<Trajectory>,
    pub frames: Vec<Vec<LabeledDetection>>,
    /// Background correspondences per adjacent frame pair (index t holds
    /// matches between frames t and t+1).
    pub matches: Vec<Vec<Correspondence>>,
    /// True fundamental matrix per adjacent frame pair; None when the
    /// camera baseline vanishes (static camera).
    pub true_fundamentals: Vec<Option<FundamentalMatrix>>,
    pub prototypes: Vec<AppearanceFeature>,
}

impl SyntheticSequence {
    /// Detection lists without identity labels, as the tracker consumes them.
    pub fn detection_frames(&self) -> Vec<Vec<Detection>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|l| l.detection.clone()).collect())
            .collect()
    }

    /// Per-identity trajectories over the actual detections (detector noise
    /// included, clutter excluded). Frame gaps from drops and occlusions
    /// remain, which downstream splitting handles.
    pub fn training_trajectories(&self) -> Vec<Trajectory> {
        let mut by_id: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
        for frame in &self.frames {
            for l in frame {
                if let Some(id) = l.identity {
                    by_id.entry(id).or_default().push(l.detection.clone());
                }
            }
        }
        by_id
            .into_iter()
            .map(|(id, dets)| Trajectory {
                object_id: id as i64 + 1,
                entries: dets
                    .into_iter()
                    .map(|detection| TrajectoryEntry {
                        detection,
                        interpolated: false,
                    })
                    .collect(),
            })
            .collect()
    }
}

const MAX_PROTO_COS: f64 = 0.3;
const PROTO_ATTEMPTS: usize = 10_000;

/// Scene depth of the target plane relative to the focal length.
const DEPTH_SCALE: f64 = 2.0;
/// Translating mode: maximum pan angle (radians) and dolly step per frame
/// as a fraction of the scene depth.
const PAN_MAX: f64 = 0.22;
const PAN_PERIOD_FRAMES: f64 = 40.0;
const DOLLY_FRACTION_PER_FRAME: f64 = 0.002;
/// Orbiting mode: orbit radius as a fraction of scene depth and the angle
/// traversed per frame.
const ORBIT_RADIUS_FRACTION: f64 = 0.18;
const ORBIT_STEP: f64 = 0.004;

fn intrinsics(meta: &FrameMeta) -> Matrix3<f64> {
    let f = meta.width as f64;
    Matrix3::new(
        f,
        0.0,
        meta.width as f64 / 2.0,
        0.0,
        f,
        meta.height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    )
}

fn look_at(c: Vector3<f64>, target: Vector3<f64>) -> Matrix3<f64> {
    let z = (target - c).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Camera pose at a frame for the configured path.
pub fn camera_at(cfg: &SceneConfig, t: usize) -> Camera {
    let k = intrinsics(&cfg.frame);
    let f = cfg.frame.width as f64;
    let z0 = DEPTH_SCALE * f;
    let center = Vector3::new(0.0, 0.0, z0);
    match cfg.camera_mode {
        CameraMode::Static => Camera {
            k,
            r: Matrix3::identity(),
            c: Vector3::zeros(),
        },
        CameraMode::Translating => {
            let phi = PAN_MAX * (2.0 * std::f64::consts::PI * t as f64 / PAN_PERIOD_FRAMES).sin();
            let (s, c) = phi.sin_cos();
            let r = Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c);
            Camera {
                k,
                r,
                c: Vector3::new(0.0, 0.0, DOLLY_FRACTION_PER_FRAME * z0 * t as f64),
            }
        }
        CameraMode::Orbiting => {
            let theta = ORBIT_STEP * t as f64;
            let rho = ORBIT_RADIUS_FRACTION * z0;
            let c = center + Vector3::new(rho * theta.sin(), 0.0, -rho * theta.cos()) * 1.0
                - Vector3::new(0.0, 0.0, z0 - rho); // start at the canonical distance
            let c = Vector3::new(c.x, 0.0, c.z);
            Camera {
                k,
                r: look_at(c, center),
                c,
            }
        }
    }
}

struct TargetState {
    pos: Vector3<f64>,
    vel: Vector3<f64>,
    half_w: f64,
    half_h: f64,
    bound_x: f64,
    bound_y: f64,
}

fn uniform(rng: &mut dyn RngCore, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + u * (hi - lo)
}

fn random_unit_feature(dim: usize, rng: &mut dyn RngCore) -> AppearanceFeature {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return AppearanceFeature(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

fn draw_prototypes(cfg: &SceneConfig, rng: &mut dyn RngCore) -> Result<Vec<AppearanceFeature>, SynthError> {
    let mut protos: Vec<AppearanceFeature> = Vec::with_capacity(cfg.n_targets);
    let mut attempts = 0usize;
    while protos.len() < cfg.n_targets {
        if attempts >= PROTO_ATTEMPTS {
            return Err(SynthError::PrototypeRejection {
                targets: cfg.n_targets,
                dim: cfg.feature_dim,
                max_cos: MAX_PROTO_COS,
            });
        }
        attempts += 1;
        let cand = random_unit_feature(cfg.feature_dim, rng);
        let ok = protos.iter().all(|p| {
            p.cosine_similarity(&cand)
                .map(|c| c.abs() <= MAX_PROTO_COS)
                .unwrap_or(false)
        });
        if ok {
            protos.push(cand);
        }
    }
    Ok(protos)
}

fn poisson(rate: f64, rng: &mut dyn RngCore) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let l = (-rate).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= uniform(rng, 0.0, 1.0);
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn noisy_unit_feature(
    proto: &AppearanceFeature,
    sigma: f64,
    rng: &mut dyn RngCore,
) -> AppearanceFeature {
    if sigma <= 0.0 {
        return proto.clone();
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut v: Vec<f64> = proto.0.iter().map(|x| x + normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    AppearanceFeature(v)
}

fn jitter_box(b: &BoundingBox, sigma: f64, rng: &mut dyn RngCore) -> BoundingBox {
    if sigma <= 0.0 {
        return *b;
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let a1 = normal.sample(rng);
    let a2 = normal.sample(rng);
    let a3 = normal.sample(rng);
    let a4 = normal.sample(rng);
    BoundingBox {
        cx: b.cx + a1 * b.w,
        cy: b.cy + a2 * b.h,
        w: (b.w * (1.0 + a3)).max(1e-6),
        h: (b.h * (1.0 + a4)).max(1e-6),
    }
}

/// Generates the scene. Targets follow constant-velocity paths on their
/// depth plane with reflection at the initial view's borders; detections are
/// the projected ground truth with relative jitter, dropout and Poisson
/// clutter; appearance features are unit prototypes (pairwise |cos| <= 0.3)
/// plus Gaussian noise, renormalized. Fully deterministic for a fixed seed.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticSequence, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let meta = cfg.frame;
    let f = meta.width as f64;
    let z0 = DEPTH_SCALE * f;

    let prototypes = draw_prototypes(cfg, &mut rng)?;

    // Target kinematics on per-target depth planes.
    let mut targets: Vec<TargetState> = Vec::with_capacity(cfg.n_targets);
    for _ in 0..cfg.n_targets {
        let depth = z0 * uniform(&mut rng, 0.85, 1.15);
        let img_h = meta.height as f64 * uniform(&mut rng, 0.10, 0.16);
        let img_w = img_h * uniform(&mut rng, 0.45, 0.60);
        let half_w = 0.5 * img_w * depth / f;
        let half_h = 0.5 * img_h * depth / f;
        let bound_x = 0.5 * meta.width as f64 * depth / f * 0.8 - half_w;
        let bound_y = 0.5 * meta.height as f64 * depth / f * 0.7 - half_h;
        let px = uniform(&mut rng, -bound_x, bound_x);
        let py = uniform(&mut rng, -bound_y, bound_y);
        let speed_world = cfg.target_speed_px * uniform(&mut rng, 0.6, 1.4) * depth / f;
        let angle = uniform(&mut rng, 0.0, 2.0 * std::f64::consts::PI);
        targets.push(TargetState {
            pos: Vector3::new(px, py, depth),
            vel: Vector3::new(speed_world * angle.cos(), speed_world * angle.sin(), 0.0),
            half_w,
            half_h,
            bound_x,
            bound_y,
        });
    }

    // Static background cloud across a depth slab.
    let mut background: Vec<Vector3<f64>> = Vec::with_capacity(cfg.n_background_points);
    for _ in 0..cfg.n_background_points {
        let depth = z0 * uniform(&mut rng, 0.6, 2.2);
        let hx = 0.5 * meta.width as f64 * depth / f * 1.3;
        let hy = 0.5 * meta.height as f64 * depth / f * 1.3;
        background.push(Vector3::new(
            uniform(&mut rng, -hx, hx),
            uniform(&mut rng, -hy, hy),
            depth,
        ));
    }

    let cameras: Vec<Camera> = (0..cfg.n_frames).map(|t| camera_at(cfg, t)).collect();

    let occluded = |target: usize, frame: usize| {
        cfg.occlusion_events
            .iter()
            .any(|e| e.target == target && e.start <= frame && frame <= e.end)
    };

    // Ground truth boxes per target per frame.
    let mut gt_entries: Vec<Vec<TrajectoryEntry>> = vec![Vec::new(); cfg.n_targets];
    let mut gt_boxes: Vec<Vec<Option<BoundingBox>>> = vec![vec![None; cfg.n_frames]; cfg.n_targets];
    for t in 0..cfg.n_frames {
        let cam = &cameras[t];
        for (i, target) in targets.iter_mut().enumerate() {
            if t > 0 {
                target.pos += target.vel;
                if target.pos.x.abs() > target.bound_x {
                    target.vel.x = -target.vel.x;
                    target.pos.x = target.pos.x.clamp(-target.bound_x, target.bound_x);
                }
                if target.pos.y.abs() > target.bound_y {
                    target.vel.y = -target.vel.y;
                    target.pos.y = target.pos.y.clamp(-target.bound_y, target.bound_y);
                }
            }
            if occluded(i, t) {
                continue;
            }
            let Some(center) = cam.project(&target.pos) else {
                continue;
            };
            let depth = cam.depth(&target.pos);
            let bbox = BoundingBox {
                cx: center.x,
                cy: center.y,
                w: 2.0 * target.half_w * f / depth,
                h: 2.0 * target.half_h * f / depth,
            };
            gt_boxes[i][t] = Some(bbox);
            gt_entries[i].push(TrajectoryEntry {
                detection: Detection {
                    frame: t,
                    bbox,
                    confidence: 1.0,
                    feature: prototypes[i].clone(),
                },
                interpolated: false,
            });
        }
    }

    // Detections: jittered ground truth plus clutter.
    let mut frames: Vec<Vec<LabeledDetection>> = Vec::with_capacity(cfg.n_frames);
    let mean_w: f64 = targets.iter().map(|t| 2.0 * t.half_w * f / t.pos.z).sum::<f64>()
        / cfg.n_targets as f64;
    let mean_h: f64 = targets.iter().map(|t| 2.0 * t.half_h * f / t.pos.z).sum::<f64>()
        / cfg.n_targets as f64;
    for t in 0..cfg.n_frames {
        let mut dets: Vec<LabeledDetection> = Vec::new();
        for i in 0..cfg.n_targets {
            let Some(bbox) = gt_boxes[i][t] else { continue };
            if cfg.detection_drop_prob > 0.0 && uniform(&mut rng, 0.0, 1.0) < cfg.detection_drop_prob
            {
                continue;
            }
            let jittered = jitter_box(&bbox, cfg.box_jitter_sigma, &mut rng);
            let feature = noisy_unit_feature(&prototypes[i], cfg.feature_noise_sigma, &mut rng);
            dets.push(LabeledDetection {
                detection: Detection {
                    frame: t,
                    bbox: jittered,
                    confidence: 1.0,
                    feature,
                },
                identity: Some(i),
            });
        }
        for _ in 0..poisson(cfg.false_positive_rate, &mut rng) {
            let w = (mean_w * uniform(&mut rng, 0.7, 1.4)).max(2.0);
            let h = (mean_h * uniform(&mut rng, 0.7, 1.4)).max(2.0);
            dets.push(LabeledDetection {
                detection: Detection {
                    frame: t,
                    bbox: BoundingBox {
                        cx: uniform(&mut rng, 0.0, meta.width as f64),
                        cy: uniform(&mut rng, 0.0, meta.height as f64),
                        w,
                        h,
                    },
                    confidence: 1.0,
                    feature: random_unit_feature(cfg.feature_dim, &mut rng),
                },
                identity: None,
            });
        }
        frames.push(dets);
    }

    // Background correspondences and true epipolar geometry per frame pair.
    let mut matches: Vec<Vec<Correspondence>> = Vec::with_capacity(cfg.n_frames - 1);
    let mut true_fundamentals: Vec<Option<FundamentalMatrix>> = Vec::with_capacity(cfg.n_frames - 1);
    let in_extended_frame = |p: &Point2<f64>| {
        p.x >= -0.2 * meta.width as f64
            && p.x <= 1.2 * meta.width as f64
            && p.y >= -0.2 * meta.height as f64
            && p.y <= 1.2 * meta.height as f64
    };
    for t in 0..cfg.n_frames - 1 {
        let (c1, c2) = (&cameras[t], &cameras[t + 1]);
        let mut pair_matches = Vec::new();
        for x in &background {
            let (Some(p1), Some(p2)) = (c1.project(x), c2.project(x)) else {
                continue;
            };
            if in_extended_frame(&p1) && in_extended_frame(&p2) {
                pair_matches.push(Correspondence::new(p1, p2));
            }
        }
        matches.push(pair_matches);
        true_fundamentals.push(fundamental_from_cameras(c1, c2));
    }

    let gt = gt_entries
        .into_iter()
        .enumerate()
        .filter(|(_, e)| !e.is_empty())
        .map(|(i, entries)| Trajectory {
            object_id: i as i64 + 1,
            entries,
        })
        .collect();

    Ok(SyntheticSequence {
        meta,
        gt,
        frames,
        matches,
        true_fundamentals,
        prototypes,
    })
}

/// Adds N(0, sigma^2) per feature entry to every detection feature and
/// renormalizes; ground truth, boxes and geometry stay untouched.
/// Deterministic for a fixed seed.
pub fn corrupt_features(seq: &SyntheticSequence, sigma: f64, seed: u64) -> SyntheticSequence {
    let mut out = seq.clone();
    if sigma <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    for frame in &mut out.frames {
        for l in frame {
            let mut v: Vec<f64> = l
                .detection
                .feature
                .0
                .iter()
                .map(|x| x + normal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
            }
            l.detection.feature = AppearanceFeature(v);
        }
    }
    out
}
