//! Imitation reward: silhouette overlap, clip-embedding similarity and
//! motion regularizers, plus the mapping from simulation steps to frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Embedding;
use crate::physics::SimState;
use crate::render::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("mask resolution mismatch: {0:?} vs {1:?}")]
    ResolutionMismatch((usize, usize), (usize, usize)),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Foot speeds at or below this count as static contact (m/s).
pub const SLIP_SPEED: f64 = 0.01;
/// Air-time bonus saturates after this long (s).
pub const AIR_TIME_CAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// video similarity
    pub alpha: f64,
    /// mask IoU
    pub beta: f64,
    /// regularization
    pub gamma_reg: f64,
    pub c_j: f64,
    pub c_a: f64,
    pub c_v: f64,
    pub c_f: f64,
    pub c_air: f64,
    pub c_s: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 1.0,
            gamma_reg: 1.0,
            c_j: 1e-3,
            c_a: 1e-2,
            c_v: 1e-4,
            c_f: 0.1,
            c_air: 0.1,
            c_s: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        [self.alpha, self.beta, self.gamma_reg, self.c_j, self.c_a, self.c_v, self.c_f, self.c_air, self.c_s]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// How a per-frame reward is spread over the `k` simulation steps it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardAssignment {
    /// every step receives the frame reward
    #[default]
    Repeat,
    /// every step receives the frame reward divided by `k`
    Divide,
}

impl RewardAssignment {
    pub fn per_step(self, frame_reward: f64, k: usize) -> f64 {
        match self {
            RewardAssignment::Repeat => frame_reward,
            RewardAssignment::Divide => frame_reward / k as f64,
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, RewardError> {
    if a.height != b.height || a.width != b.width || a.data.len() != b.data.len() {
        return Err(RewardError::ResolutionMismatch((a.height, a.width), (b.height, b.width)));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        log::debug!("both masks empty (frames {} / {}); agent likely out of view", a.index, b.index);
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Negative Euclidean distance between two embeddings.
pub fn video_similarity(zf: &Embedding, ze: &Embedding) -> Result<f64, RewardError> {
    if zf.dim() != ze.dim() {
        return Err(RewardError::DimensionMismatch(zf.dim(), ze.dim()));
    }
    let dist = zf.values.iter().zip(&ze.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(0.0 - dist)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub p_j: f64,
    pub p_a: f64,
    pub p_v: f64,
    pub p_f: f64,
    pub p_s: f64,
    pub total: f64,
}

impl RegTerms {
    fn from_parts(p_j: f64, p_a: f64, p_v: f64, p_f: f64, p_s: f64) -> Self {
        Self { p_j, p_a, p_v, p_f, p_s, total: p_j + p_a + p_v + p_f + p_s }
    }

    /// Component-wise mean.
    pub fn mean(terms: &[RegTerms]) -> RegTerms {
        if terms.is_empty() {
            return RegTerms::default();
        }
        let n = terms.len() as f64;
        let avg = |f: fn(&RegTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
        Self::from_parts(avg(|t| t.p_j), avg(|t| t.p_a), avg(|t| t.p_v), avg(|t| t.p_f), avg(|t| t.p_s))
    }
}

/// Motion regularizers for the transition into `curr` under `action`.
/// `action` and `prev_action` are in whatever units the caller penalizes;
/// the trainer passes torque-limit-normalized commands.
pub fn reg_penalty(curr: &SimState, action: &[f64], prev_action: &[f64], w: &RewardWeights) -> RegTerms {
    let p_j = -w.c_j * action.iter().map(|t| t * t).sum::<f64>();
    let p_a = -w.c_a * action.iter().zip(prev_action).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let p_v = -w.c_v * curr.joint_vels.iter().map(|v| v * v).sum::<f64>();
    let mut slip = 0.0;
    let mut air = 0.0;
    for ((&contact, &speed), &airtime) in curr.foot_contact.iter().zip(&curr.foot_speed).zip(&curr.foot_air_time) {
        if contact && speed.abs() > SLIP_SPEED {
            slip += speed.abs();
        }
        air += airtime.min(AIR_TIME_CAP);
    }
    let p_f = -w.c_f * slip + w.c_air * air;
    let p_s = -w.c_s * curr.root_angle * curr.root_angle;
    RegTerms::from_parts(p_j, p_a, p_v, p_f, p_s)
}

/// One frame's reward and its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub frame: usize,
    pub step: usize,
    pub s_v: f64,
    pub s_m: f64,
    pub reg: RegTerms,
    pub r_total: f64,
}

pub const CSV_HEADER: &str = "frame,step,s_v,s_m,p_j,p_a,p_v,p_f,p_s,p_total,r_total";

impl RewardBreakdown {
    pub fn csv_row(&self) -> String {
        let r = &self.reg;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.frame, self.step, self.s_v, self.s_m, r.p_j, r.p_a, r.p_v, r.p_f, r.p_s, r.total, self.r_total
        )
    }
}

/// `alpha S_v + beta S_M + gamma_reg P_total`.
pub fn combined_reward(s_v: f64, s_m: f64, reg: RegTerms, w: &RewardWeights, frame: usize, step: usize) -> RewardBreakdown {
    let r_total = w.alpha * s_v + w.beta * s_m + w.gamma_reg * reg.total;
    RewardBreakdown { frame, step, s_v, s_m, reg, r_total }
}

/// Reference frame for simulation step `step` when `k` steps make one frame
/// of an `n`-frame reference.
pub fn align_timesteps(step: usize, k: usize, n: usize) -> usize {
    assert!(k >= 1 && n >= 1, "align_timesteps needs k >= 1 and n >= 1");
    (step / k).min(n - 1)
}
