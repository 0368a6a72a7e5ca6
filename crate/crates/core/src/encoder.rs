//! Clip assembly and clip-to-embedding encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::Frame;

pub const CLIP_LEN: usize = 8;
/// Patch grid is `GRID x GRID` per frame.
pub const GRID: usize = 8;
/// Two features (mean intensity, mean temporal difference) per patch per frame.
pub const FEATURE_DIM: usize = 2 * GRID * GRID * CLIP_LEN;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("clip anchor {t} out of range for {n} frames")]
    IndexOutOfRange { t: usize, n: usize },
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("bridge unavailable: {0}")]
    BridgeUnavailable(String),
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error("bridge did not answer within {0:?}")]
    Timeout(std::time::Duration),
}

/// How clips anchored before the eighth frame are padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPadding {
    /// `[0, .., 0, 1, .., t]`: repeat the first frame, keep every frame up to `t`.
    #[default]
    Clamp,
    /// `[0, .., 0, t]`: seven copies of the first frame followed by frame `t`.
    Literal,
}

/// Frame indices making up the clip anchored at `t` in an `n`-frame video.
pub fn clip_indices(t: usize, n: usize, padding: ClipPadding) -> Result<[usize; CLIP_LEN], EncoderError> {
    if t >= n {
        return Err(EncoderError::IndexOutOfRange { t, n });
    }
    let mut idx = [0usize; CLIP_LEN];
    match padding {
        ClipPadding::Clamp => {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = (t + i).saturating_sub(CLIP_LEN - 1);
            }
        }
        ClipPadding::Literal => {
            if t >= CLIP_LEN - 1 {
                for (i, slot) in idx.iter_mut().enumerate() {
                    *slot = t + i + 1 - CLIP_LEN;
                }
            } else {
                idx[CLIP_LEN - 1] = t;
            }
        }
    }
    Ok(idx)
}

/// Eight consecutive (masked) frames ending at `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
    pub anchor: usize,
}

impl Clip {
    pub fn new(frames: Vec<Frame>, anchor: usize) -> Result<Self, EncoderError> {
        if frames.len() != CLIP_LEN {
            return Err(EncoderError::ResolutionMismatch(format!(
                "clip needs {CLIP_LEN} frames, got {}",
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w || f.data.len() != h * w) {
            return Err(EncoderError::ResolutionMismatch("clip frames differ in resolution".into()));
        }
        Ok(Self { frames, anchor })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Index of each clip frame in its source video.
    pub fn source_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.index).collect()
    }
}

pub fn assemble_clip(frames: &[Frame], t: usize, padding: ClipPadding) -> Result<Clip, EncoderError> {
    let idx = clip_indices(t, frames.len(), padding)?;
    Clip::new(idx.iter().map(|&i| frames[i].clone()).collect(), t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub anchor: usize,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderParams {
    pub seed: u64,
    pub d: usize,
    pub padding: ClipPadding,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self { seed: 0, d: 64, padding: ClipPadding::Clamp }
    }
}

/// Anything that maps a clip to a fixed-dimension embedding.
pub trait ClipEncoder {
    fn dim(&self) -> usize;
    fn encode(&mut self, clip: &Clip) -> Result<Embedding, EncoderError>;
}

/// Patch statistics of a clip: for each frame and each cell of an 8x8 grid,
/// the mean intensity and the mean absolute difference to the previous clip
/// frame (zero for the first), both scaled to [0, 1].
pub fn patch_features(clip: &Clip) -> Vec<f64> {
    let (h, w) = (clip.height(), clip.width());
    let bounds = |len: usize, i: usize| (i * len / GRID, (i + 1) * len / GRID);
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for (k, frame) in clip.frames.iter().enumerate() {
        let prev = (k > 0).then(|| &clip.frames[k - 1]);
        for gr in 0..GRID {
            let (r0, r1) = bounds(h, gr);
            for gc in 0..GRID {
                let (c0, c1) = bounds(w, gc);
                let count = (r1 - r0) * (c1 - c0);
                if count == 0 {
                    out.extend([0.0, 0.0]);
                    continue;
                }
                let mut sum = 0u64;
                let mut diff = 0u64;
                for r in r0..r1 {
                    let row = &frame.data[r * w + c0..r * w + c1];
                    sum += row.iter().map(|&v| v as u64).sum::<u64>();
                    if let Some(p) = prev {
                        let prow = &p.data[r * w + c0..r * w + c1];
                        diff += row.iter().zip(prow).map(|(&a, &b)| a.abs_diff(b) as u64).sum::<u64>();
                    }
                }
                let scale = 255.0 * count as f64;
                out.push(sum as f64 / scale);
                out.push(diff as f64 / scale);
            }
        }
    }
    out
}

/// Deterministic reference encoder: patch statistics projected by a seeded
/// Gaussian matrix, then L2-normalized.
#[derive(Debug, Clone)]
pub struct BuiltinEncoder {
    params: EncoderParams,
    /// `d x FEATURE_DIM`, row-major.
    projection: Vec<f64>,
}

impl BuiltinEncoder {
    pub fn new(params: EncoderParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let projection = (0..params.d * FEATURE_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { params, projection }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn encode_clip(&self, clip: &Clip) -> Embedding {
        let x = patch_features(clip);
        let mut values = vec![0.0; self.params.d];
        if x.iter().any(|&v| v != 0.0) {
            for (out, row) in values.iter_mut().zip(self.projection.chunks_exact(FEATURE_DIM)) {
                *out = row.iter().zip(&x).map(|(a, b)| a * b).sum();
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                values.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Embedding { values, anchor: clip.anchor }
    }

    /// Embeddings of every clip anchor of a video.
    pub fn encode_video(&self, frames: &[Frame]) -> Result<Vec<Embedding>, EncoderError> {
        (0..frames.len()).map(|t| Ok(self.encode_clip(&assemble_clip(frames, t, self.params.padding)?))).collect()
    }
}

impl ClipEncoder for BuiltinEncoder {
    fn dim(&self) -> usize {
        self.params.d
    }

    fn encode(&mut self, clip: &Clip) -> Result<Embedding, EncoderError> {
        Ok(self.encode_clip(clip))
    }
}
