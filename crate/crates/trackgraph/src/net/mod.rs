//! Connectivity scoring of tracklet pairs with a multi-scale time-domain
//! convolutional network: input-tensor assembly, the forward/backward passes,
//! the training loop and the two training-data augmentations.
//!
//! The network consumes a 3-channel tensor over a fixed time window T. Rows
//! are the 4 normalized box parameters plus the d_ap appearance dimensions;
//! channel 0 carries the embedded features of both tracklets (with the gap
//! between them linearly interpolated), channels 1 and 2 are binary masks
//! marking which window columns each tracklet occupies. Convolutions run
//! along time only, so appearance dimensions never mix before the average
//! pooling stage.

mod augment;
mod model;
mod train;

pub use augment::{augment_box, split_trajectory, AugmentConfig};
pub use model::{forward, init_weights, loss_and_gradient, NetGrads, NetWeights};
pub use train::{learning_rate, train, PairSampler, TrainConfig, TrainReport};

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{FrameMeta, Tracklet};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("tracklets overlap in time; no input tensor exists for the pair")]
    Overlap,
    #[error("first tracklet must end before the second starts")]
    PairNotOrdered,
    #[error("time gap {gap} exceeds the window length {window}")]
    GapTooLarge { gap: usize, window: usize },
    #[error("feature dimension {got} does not match configured d_ap {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error("pair sampler exhausted")]
    SamplerExhausted,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. The window length must be divisible by 8
/// (three max-pool halvings) and kernel sizes must be odd so same-padding
/// keeps the time axis aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Time window T.
    pub t_window: usize,
    /// Appearance feature dimension.
    pub d_ap: usize,
    /// Output channels per kernel size and conv block.
    pub channels: usize,
    /// Time-domain kernel sizes, applied in parallel per block.
    pub kernel_sizes: [usize; 4],
    /// Width of the first fully connected layer.
    pub fc_hidden: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            t_window: 64,
            d_ap: 8,
            channels: 16,
            kernel_sizes: [3, 5, 9, 13],
            fc_hidden: 128,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.t_window == 0 || self.t_window % 8 != 0 {
            return Err(NetError::Config(format!(
                "time window must be a positive multiple of 8, got {}",
                self.t_window
            )));
        }
        if self.d_ap == 0 {
            return Err(NetError::Config("d_ap must be positive".into()));
        }
        if self.channels == 0 || self.fc_hidden == 0 {
            return Err(NetError::Config("channel counts must be positive".into()));
        }
        for k in self.kernel_sizes {
            if k == 0 || k % 2 == 0 {
                return Err(NetError::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Rows of the embedded feature space: 4 box parameters plus d_ap.
    pub fn rows(&self) -> usize {
        4 + self.d_ap
    }
}

pub(crate) const CH_FEATURES: usize = 0;
pub(crate) const CH_MASK_FIRST: usize = 1;
pub(crate) const CH_MASK_SECOND: usize = 2;

/// The network input: shape (3 channels, 4 + d_ap rows, T columns).
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    d_ap: usize,
    t_window: usize,
    data: Vec<f64>,
}

impl InputTensor {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            d_ap: cfg.d_ap,
            t_window: cfg.t_window,
            data: vec![0.0; 3 * (4 + cfg.d_ap) * cfg.t_window],
        }
    }

    pub fn d_ap(&self) -> usize {
        self.d_ap
    }

    pub fn t_window(&self) -> usize {
        self.t_window
    }

    pub fn rows(&self) -> usize {
        4 + self.d_ap
    }

    #[inline]
    fn idx(&self, channel: usize, row: usize, t: usize) -> usize {
        (channel * self.rows() + row) * self.t_window + t
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, t: usize) -> f64 {
        self.data[self.idx(channel, row, t)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, t: usize, value: f64) {
        let i = self.idx(channel, row, t);
        self.data[i] = value;
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Normalized box parameters concatenated with the appearance feature.
fn embed(det: &crate::types::Detection, meta: &FrameMeta, d_ap: usize) -> Result<Vec<f64>, NetError> {
    if det.feature.dim() != d_ap {
        return Err(NetError::FeatureDim {
            expected: d_ap,
            got: det.feature.dim(),
        });
    }
    let nb = det.bbox.normalize(meta);
    let mut v = Vec::with_capacity(4 + d_ap);
    v.extend_from_slice(&[nb.cx, nb.cy, nb.w, nb.h]);
    v.extend_from_slice(&det.feature.0);
    Ok(v)
}

/// Builds the network input for an ordered non-overlapping pair.
///
/// The window starts at the first kept frame of `u`. When the combined span
/// exceeds T, `u` is cropped to its last ceil(T/2) frames (and further if the
/// gap leaves less room), and `w`'s tail is cropped to whatever fits: the
/// connection region between the tracklets is the part that carries signal.
/// Gap columns hold the linear interpolation between `u`'s last and `w`'s
/// first embedded vectors; columns after `w` stay zero.
pub fn assemble_input(
    u: &Tracklet,
    w: &Tracklet,
    meta: &FrameMeta,
    cfg: &NetConfig,
) -> Result<InputTensor, NetError> {
    cfg.validate()?;
    let t_window = cfg.t_window;
    if u.time_overlap(w) {
        return Err(NetError::Overlap);
    }
    if u.end_frame() >= w.start_frame() {
        return Err(NetError::PairNotOrdered);
    }
    let gap = w.start_frame() - u.end_frame();
    if gap > t_window {
        return Err(NetError::GapTooLarge {
            gap,
            window: t_window,
        });
    }

    let span = w.end_frame() - u.start_frame() + 1;
    let mut keep_u = u.len();
    if span > t_window {
        keep_u = keep_u.min(t_window.div_ceil(2));
    }
    if keep_u + gap > t_window {
        keep_u = (t_window - gap).max(1);
    }
    let u_dets = &u.detections()[u.len() - keep_u..];
    let w_first_col = keep_u + gap - 1;
    let keep_w = w.len().min(t_window.saturating_sub(w_first_col));
    let w_dets = &w.detections()[..keep_w];

    let mut x = InputTensor::zeros(cfg);
    let rows = cfg.rows();
    for (col, det) in u_dets.iter().enumerate() {
        let e = embed(det, meta, cfg.d_ap)?;
        for (row, &v) in e.iter().enumerate() {
            x.set(CH_FEATURES, row, col, v);
        }
        for row in 0..rows {
            x.set(CH_MASK_FIRST, row, col, 1.0);
        }
    }
    for (i, det) in w_dets.iter().enumerate() {
        let col = w_first_col + i;
        let e = embed(det, meta, cfg.d_ap)?;
        for (row, &v) in e.iter().enumerate() {
            x.set(CH_FEATURES, row, col, v);
        }
        for row in 0..rows {
            x.set(CH_MASK_SECOND, row, col, 1.0);
        }
    }
    // Interpolate the gap between u's last and w's first embedded vectors,
    // even when w's first frame was cropped past the window end.
    let e_last = embed(u.last(), meta, cfg.d_ap)?;
    let e_first = embed(w.first(), meta, cfg.d_ap)?;
    let last_col = keep_u - 1;
    for col in keep_u..w_first_col.min(t_window) {
        let alpha = (col - last_col) as f64 / (w_first_col - last_col) as f64;
        for row in 0..rows {
            let v = e_last[row] + alpha * (e_first[row] - e_last[row]);
            x.set(CH_FEATURES, row, col, v);
        }
    }
    Ok(x)
}

/// Connectivity of a tracklet pair: exactly 0 for time-overlapping pairs and
/// pairs farther apart than the window; otherwise the network output on the
/// assembled input with the earlier tracklet first. Symmetric in its
/// arguments. Panics if feature dimensions do not match the configuration
/// (inputs are validated at the IO boundary).
pub fn connectivity(
    u: &Tracklet,
    w: &Tracklet,
    weights: &NetWeights,
    meta: &FrameMeta,
    cfg: &NetConfig,
) -> f64 {
    if u.time_overlap(w) || u.time_gap(w) > cfg.t_window {
        return 0.0;
    }
    let (first, second) = if u.start_frame() <= w.start_frame() {
        (u, w)
    } else {
        (w, u)
    };
    let x = assemble_input(first, second, meta, cfg)
        .expect("non-overlapping gated pair with validated features must assemble");
    forward(&x, weights, cfg).expect("assembled input matches the network configuration")
}

const WEIGHT_MAGIC: &[u8; 4] = b"TNTW";
const WEIGHT_VERSION: u32 = 1;

/// Serializes weights in the binary little-endian format: magic `TNTW`,
/// version, the config integers (T, d_ap, channels, fc_hidden), then every
/// tensor in fixed layer order as rank, dims and row-major f32 data.
pub fn save_weights(weights: &NetWeights, cfg: &NetConfig, path: &Path) -> Result<(), NetError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for v in [cfg.t_window, cfg.d_ap, cfg.channels, cfg.fc_hidden] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for view in weights.tensor_views() {
        buf.extend_from_slice(&(view.dims.len() as u32).to_le_bytes());
        for d in &view.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in view.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads weights written by [`save_weights`], validating the header against
/// `cfg` and every tensor shape against the expected layout.
pub fn load_weights(path: &Path, cfg: &NetConfig) -> Result<NetWeights, NetError> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], NetError> {
        if *off + n > buf.len() {
            return Err(NetError::Format("truncated weight file".into()));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != WEIGHT_MAGIC {
        return Err(NetError::Format("bad magic, not a weight file".into()));
    }
    let read_u32 = |off: &mut usize| -> Result<u32, NetError> {
        let b = take(off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = read_u32(&mut off)?;
    if version != WEIGHT_VERSION {
        return Err(NetError::Format(format!(
            "unsupported weight format version {version}"
        )));
    }
    let header = [
        read_u32(&mut off)? as usize,
        read_u32(&mut off)? as usize,
        read_u32(&mut off)? as usize,
        read_u32(&mut off)? as usize,
    ];
    let expected = [cfg.t_window, cfg.d_ap, cfg.channels, cfg.fc_hidden];
    if header != expected {
        return Err(NetError::Shape(format!(
            "weight file built for (T, d_ap, C, fc_hidden) = {header:?}, config expects {expected:?}"
        )));
    }

    let mut weights = NetWeights::zeros(cfg);
    for view in weights.tensor_layout(cfg) {
        let rank = read_u32(&mut off)? as usize;
        if rank != view.dims.len() {
            return Err(NetError::Shape(format!(
                "tensor {}: rank {rank} in file, expected {}",
                view.name,
                view.dims.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut off)? as usize);
        }
        if dims != view.dims {
            return Err(NetError::Shape(format!(
                "tensor {}: dims {dims:?} in file, expected {:?}",
                view.name, view.dims
            )));
        }
        let count: usize = dims.iter().product();
        let bytes = take(&mut off, count * 4)?;
        let mut data = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        weights.set_tensor(view.index, data);
    }
    if off != buf.len() {
        return Err(NetError::Format("trailing bytes after last tensor".into()));
    }
    Ok(weights)
}
