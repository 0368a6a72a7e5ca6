//! Imitation environment: torques in, observations and per-frame rewards out.
//!
//! One environment step applies a command for `substeps` physics steps. Every
//! `k` environment steps (one reference frame period) the agent is rendered
//! under the follow camera and scored against the reference frame that
//! `align_timesteps` assigns to the number of steps taken so far.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{assemble_clip, ClipEncoder, ClipPadding, Embedding, EncoderError};
use crate::physics::{Action, SimError, SimState, Simulator};
use crate::render::{render_frame, render_mask, Camera, Frame, Mask};
use crate::reward::{
    align_timesteps, combined_reward, mask_iou, reg_penalty, video_similarity, RegTerms, RewardAssignment,
    RewardBreakdown, RewardError, RewardWeights,
};
use crate::video::VideoSequence;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Physics step, seconds.
    pub physics_dt: f64,
    /// Physics steps per environment step.
    pub substeps: usize,
    /// Multiplier applied to velocity entries of the observation.
    pub velocity_scale: f64,
    /// Append normalized episode time to the observation.
    pub time_feature: bool,
    /// Append sin/cos of the reference phase (fundamental and first harmonic),
    /// using the period estimated from the reference masks.
    pub phase_features: bool,
    pub assignment: RewardAssignment,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics_dt: 0.002,
            substeps: 4,
            velocity_scale: 0.1,
            time_feature: true,
            phase_features: true,
            assignment: RewardAssignment::Repeat,
        }
    }
}

impl EnvConfig {
    pub fn control_dt(&self) -> f64 {
        self.physics_dt * self.substeps as f64
    }

    /// Environment steps per reference frame at `fps`.
    pub fn steps_per_frame(&self, fps: f64) -> Result<usize, EnvError> {
        let exact = 1.0 / (fps * self.control_dt());
        let k = exact.round();
        if k < 1.0 || (exact - k).abs() > 1e-6 {
            return Err(EnvError::Config(format!(
                "frame period 1/{fps} s is not a whole number of {} s control steps",
                self.control_dt()
            )));
        }
        Ok(k as usize)
    }
}

/// Reference silhouettes and clip embeddings, indexed by frame.
#[derive(Debug, Clone)]
pub struct Reference {
    pub masks: Vec<Mask>,
    /// Dominant period of the silhouettes in frames, if they repeat.
    pub period: Option<f64>,
    pub embeddings: Vec<Embedding>,
    pub fps: f64,
}

impl Reference {
    /// Requires masks; embeddings are computed from the masked frames.
    pub fn prepare(video: &VideoSequence, encoder: &mut dyn ClipEncoder, padding: ClipPadding) -> Result<Self, EnvError> {
        let masks = video
            .masks
            .clone()
            .ok_or_else(|| EnvError::Config("reference video has no masks; segment it first".into()))?;
        let frames = video.masked_frames();
        let embeddings = (0..frames.len())
            .map(|t| encoder.encode(&assemble_clip(&frames, t, padding)?))
            .collect::<Result<Vec<_>, _>>()?;
        let period = estimate_period(&masks);
        Ok(Self { masks, embeddings, fps: video.fps, period })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.masks.first().map(|m| (m.height, m.width)).unwrap_or((0, 0))
    }
}

/// Dominant period of a silhouette sequence in frames, from the mean self-IoU
/// at each lag in `2..=n/2`. The best-scoring lag may span several periods, so
/// it is divided by the cycle count implied by the first lag scoring at least
/// half as well. Peaks are refined to sub-frame precision with a parabola.
/// Returns `None` when no lag is a local maximum.
pub fn estimate_period(masks: &[Mask]) -> Option<f64> {
    let n = masks.len();
    if n < 8 {
        return None;
    }
    let score = |lag: usize| {
        let pairs = n - lag;
        (0..pairs).map(|t| mask_iou(&masks[t], &masks[t + lag]).unwrap_or(0.0)).sum::<f64>() / pairs as f64
    };
    let s: Vec<f64> = (0..=n / 2 + 1).map(|lag| if lag < 1 { 1.0 } else { score(lag) }).collect();
    let peaks: Vec<(f64, f64)> = (2..=n / 2)
        .filter(|&l| s[l] > s[l - 1] && s[l] >= s[l + 1])
        .map(|l| {
            let (a, b, c) = (s[l - 1], s[l], s[l + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            (l as f64 + shift, b)
        })
        .collect();
    let &(best, best_score) = peaks.iter().max_by(|x, y| x.1.total_cmp(&y.1))?;
    let &(first, _) = peaks.iter().find(|p| p.1 >= 0.5 * best_score)?;
    let cycles = (best / first).round().max(1.0);
    Some(best / cycles)
}

/// Scored frame at the end of a block of `k` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub breakdown: RewardBreakdown,
    /// Reward credited to each of the block's steps.
    pub step_reward: f64,
    /// Raw mask IoU, reported even when its weight is zero.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f32>,
    pub score: Option<FrameScore>,
    /// Episode ended by a fall.
    pub terminal: bool,
    /// Episode reached its time limit.
    pub truncated: bool,
}

/// Mid-episode state sufficient to resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub state: SimState,
    pub steps: usize,
    pub prev_action: Vec<f64>,
    pub block_reg: Vec<RegTerms>,
    /// States at each rendered frame so far, frame 0 first.
    pub frame_states: Vec<SimState>,
}

pub struct ImitationEnv<E> {
    sim: Simulator,
    camera: Camera,
    reference: Reference,
    encoder: E,
    weights: RewardWeights,
    padding: ClipPadding,
    config: EnvConfig,
    k: usize,
    torque_limits: Vec<f64>,
    state: SimState,
    steps: usize,
    prev_action: Vec<f64>,
    block_reg: Vec<RegTerms>,
    frames: Vec<Frame>,
    frame_states: Vec<SimState>,
}

impl<E: ClipEncoder> ImitationEnv<E> {
    pub fn new(
        sim: Simulator,
        camera: Camera,
        reference: Reference,
        encoder: E,
        weights: RewardWeights,
        padding: ClipPadding,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        if reference.is_empty() {
            return Err(EnvError::Config("reference has no frames".into()));
        }
        if reference.resolution() != (camera.height, camera.width) {
            return Err(EnvError::Config(format!(
                "camera renders {}x{}, reference is {}x{}",
                camera.height,
                camera.width,
                reference.resolution().0,
                reference.resolution().1
            )));
        }
        if !camera.is_valid() {
            return Err(EnvError::Config("invalid camera".into()));
        }
        if !weights.is_valid() {
            return Err(EnvError::Config("reward weights must be finite".into()));
        }
        if let Some(e) = reference.embeddings.first() {
            if e.dim() != encoder.dim() {
                return Err(EnvError::Config(format!(
                    "reference embeddings have d = {}, encoder has d = {}",
                    e.dim(),
                    encoder.dim()
                )));
            }
        }
        let k = config.steps_per_frame(reference.fps)?;
        let torque_limits = sim.morphology().torque_limits();
        let state = sim.reset(0);
        let j = torque_limits.len();
        let mut env = Self {
            sim,
            camera,
            reference,
            encoder,
            weights,
            padding,
            config,
            k,
            torque_limits,
            state,
            steps: 0,
            prev_action: vec![0.0; j],
            block_reg: Vec::new(),
            frames: Vec::new(),
            frame_states: Vec::new(),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn steps_per_frame(&self) -> usize {
        self.k
    }

    /// Steps per episode: one block per reference frame.
    pub fn episode_steps(&self) -> usize {
        self.reference.len() * self.k
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn act_dim(&self) -> usize {
        self.torque_limits.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.sim.observation_dim() + self.config.time_feature as usize + 4 * self.config.phase_features as usize
    }

    /// Rendered frames of the current episode, frame 0 first.
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn observation(&self) -> Vec<f32> {
        let mut obs = self.sim.observe(&self.state);
        let j = self.sim.morphology().num_joints();
        let vel = 3 + 2 * j..3 + 2 * j + 3 + j;
        obs[vel].iter_mut().for_each(|v| *v *= self.config.velocity_scale);
        let mut out: Vec<f32> = obs.iter().map(|&v| v as f32).collect();
        if self.config.time_feature {
            out.push(self.steps as f32 / self.episode_steps() as f32);
        }
        if self.config.phase_features {
            match self.reference.period {
                Some(p) => {
                    let phase = std::f64::consts::TAU * self.steps as f64 / (self.k as f64 * p);
                    out.extend([phase.sin(), phase.cos(), (2.0 * phase).sin(), (2.0 * phase).cos()].map(|v| v as f32));
                }
                None => out.extend([0.0; 4]),
            }
        }
        out
    }

    fn render_current(&mut self) {
        let cam = self.camera.follow(&self.state);
        let index = self.frames.len();
        self.frames.push(render_frame(&self.sim, &self.state, &cam).with_index(index));
        self.frame_states.push(self.state.clone());
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f32> {
        self.state = self.sim.reset(seed);
        self.steps = 0;
        self.prev_action.iter_mut().for_each(|a| *a = 0.0);
        self.block_reg.clear();
        self.frames.clear();
        self.frame_states.clear();
        self.render_current();
        self.observation()
    }

    /// Applies a normalized command in `[-1, 1]^A` (clamped).
    pub fn step(&mut self, command: &[f32]) -> Result<StepOutcome, EnvError> {
        if command.len() != self.act_dim() {
            return Err(SimError::ActionDimension { expected: self.act_dim(), got: command.len() }.into());
        }
        let cmd: Vec<f64> = command.iter().map(|&c| (c as f64).clamp(-1.0, 1.0)).collect();
        let torques = Action::from_normalized(&cmd, &self.torque_limits);
        for _ in 0..self.config.substeps {
            self.state = self.sim.step(&self.state, &torques, self.config.physics_dt)?;
        }
        self.steps += 1;
        if self.weights.gamma_reg != 0.0 {
            self.block_reg.push(reg_penalty(&self.state, &cmd, &self.prev_action, &self.weights));
        }
        self.prev_action = cmd;

        let mut score = None;
        let mut terminal = false;
        if self.steps % self.k == 0 {
            self.render_current();
            score = Some(self.score_frame()?);
            terminal = self.sim.is_fallen(&self.state);
            self.block_reg.clear();
        }
        let truncated = !terminal && self.steps >= self.episode_steps();
        Ok(StepOutcome { obs: self.observation(), score, terminal, truncated })
    }

    fn score_frame(&mut self) -> Result<FrameScore, EnvError> {
        let f = self.frames.len() - 1;
        let r = align_timesteps(self.steps, self.k, self.reference.len());
        let cam = self.camera.follow(&self.state);
        let mask = render_mask(&self.sim, &self.state, &cam).with_index(f);
        let iou = mask_iou(&mask, &self.reference.masks[r])?;
        let s_m = if self.weights.beta != 0.0 { iou } else { 0.0 };
        let s_v = if self.weights.alpha != 0.0 {
            let clip = assemble_clip(&self.frames, f, self.padding)?;
            let z = self.encoder.encode(&clip)?;
            video_similarity(&z, &self.reference.embeddings[r])?
        } else {
            0.0
        };
        let reg = RegTerms::mean(&self.block_reg);
        let breakdown = combined_reward(s_v, s_m, reg, &self.weights, r, self.steps);
        let step_reward = self.config.assignment.per_step(breakdown.r_total, self.k);
        Ok(FrameScore { breakdown, step_reward, iou })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state.clone(),
            steps: self.steps,
            prev_action: self.prev_action.clone(),
            block_reg: self.block_reg.clone(),
            frame_states: self.frame_states.clone(),
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) {
        self.frames.clear();
        self.frame_states.clear();
        for s in &snap.frame_states {
            self.state = s.clone();
            self.render_current();
        }
        self.state = snap.state.clone();
        self.steps = snap.steps;
        self.prev_action = snap.prev_action.clone();
        self.block_reg = snap.block_reg.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BuiltinEncoder, EncoderParams};
    use crate::physics::{MorphologySpec, SimConfig};
    use crate::video::{generate_synthetic_expert, GaitScript};

    fn still_env(weights: RewardWeights) -> ImitationEnv<BuiltinEncoder> {
        let sim = Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap();
        let cam = Camera::default();
        let expert = generate_synthetic_expert(&sim, &GaitScript::still(6, 1.0), &cam, 25.0, 0).unwrap();
        let mut enc = BuiltinEncoder::new(EncoderParams::default());
        let reference = Reference::prepare(&expert.video, &mut enc, ClipPadding::Clamp).unwrap();
        ImitationEnv::new(sim, cam, reference, enc, weights, ClipPadding::Clamp, EnvConfig::default()).unwrap()
    }

    #[test]
    fn frame_cadence_and_episode_length() {
        let mut env = still_env(RewardWeights::default());
        assert_eq!(env.steps_per_frame(), 5);
        assert_eq!(env.episode_steps(), 125);
        let zero = vec![0.0f32; 6];
        let mut scored = 0;
        for i in 1..=125 {
            let out = env.step(&zero).unwrap();
            assert_eq!(out.score.is_some(), i % 5 == 0);
            scored += out.score.is_some() as usize;
            assert!(!out.terminal);
            assert_eq!(out.truncated, i == 125);
        }
        assert_eq!(scored, 25);
        assert_eq!(env.frames().len(), 26);
    }

    #[test]
    fn observation_shape_and_time_feature() {
        let mut env = still_env(RewardWeights::default());
        let obs = env.reset(3);
        let t = env.simulator().observation_dim();
        assert_eq!(obs.len(), env.obs_dim());
        assert_eq!(obs.len(), t + 5);
        assert_eq!(obs[t], 0.0);
        // a still reference has no period, so the phase features stay zero
        assert_eq!(env.reference().period, None);
        assert_eq!(&obs[t + 1..], &[0.0; 4]);
        env.step(&[0.0; 6]).unwrap();
        assert!((env.observation()[t] - 1.0 / 125.0).abs() < 1e-7);
    }

    fn bar_masks(n: usize, period: f64) -> Vec<Mask> {
        (0..n)
            .map(|i| {
                let mut m = Mask::empty(16, 40);
                let x = 12.0 + 8.0 * (std::f64::consts::TAU * i as f64 / period).sin();
                for r in 4..12 {
                    for c in x.round() as usize..x.round() as usize + 10 {
                        m.set(r, c, true);
                    }
                }
                m
            })
            .collect()
    }

    #[test]
    fn period_of_an_oscillating_bar() {
        for period in [6.0, 10.0, 12.5, 17.0] {
            let est = estimate_period(&bar_masks(100, period)).unwrap();
            assert!((est - period).abs() < 0.35, "{period}: {est}");
        }
        assert_eq!(estimate_period(&bar_masks(6, 3.0)), None);
        let still = vec![bar_masks(1, 10.0)[0].clone(); 50];
        assert_eq!(estimate_period(&still), None);
    }

    #[test]
    fn phase_features_follow_the_reference_period() {
        let sim = Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap();
        let cam = Camera::default();
        let expert = generate_synthetic_expert(&sim, &GaitScript::walker_gait_v1(), &cam, 25.0, 0).unwrap();
        let mut enc = BuiltinEncoder::new(EncoderParams::default());
        let reference = Reference::prepare(&expert.video, &mut enc, ClipPadding::Clamp).unwrap();
        let p = reference.period.unwrap();
        // silhouettes repeat every half stride: both legs look alike from the side
        let stride = 25.0 / GaitScript::walker_gait_v1().joints[0].frequency;
        assert!((p - stride).abs() < 0.5 || (p - stride / 2.0).abs() < 0.5, "{p} vs {stride}");
        let mut env =
            ImitationEnv::new(sim, cam, reference, enc, RewardWeights::default(), ClipPadding::Clamp, EnvConfig::default())
                .unwrap();
        let t = env.simulator().observation_dim() + 1;
        let obs = env.reset(0);
        assert_eq!(&obs[t..], &[0.0, 1.0, 0.0, 1.0]);
        for _ in 0..5 {
            env.step(&[0.0; 6]).unwrap();
        }
        let phase = std::f64::consts::TAU / p;
        let obs = env.observation();
        assert!((obs[t] as f64 - phase.sin()).abs() < 1e-6);
        assert!((obs[t + 3] as f64 - (2.0 * phase).cos()).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_log_zero_components() {
        let w = RewardWeights { alpha: 0.0, beta: 0.0, gamma_reg: 0.0, ..Default::default() };
        let mut env = still_env(w);
        for _ in 0..4 {
            env.step(&[0.5; 6]).unwrap();
        }
        let s = env.step(&[0.5; 6]).unwrap().score.unwrap();
        assert_eq!(s.breakdown.s_v, 0.0);
        assert_eq!(s.breakdown.s_m, 0.0);
        assert_eq!(s.breakdown.reg, RegTerms::default());
        assert_eq!(s.breakdown.r_total, 0.0);
        assert!(s.iou > 0.0);
    }

    #[test]
    fn standing_matches_standing_reference() {
        let mut env = still_env(RewardWeights::default());
        env.reset(0);
        let mut last = None;
        for _ in 0..10 {
            if let Some(s) = env.step(&[0.0; 6]).unwrap().score {
                last = Some(s);
            }
        }
        let s = last.unwrap();
        assert!(s.iou > 0.8, "iou {}", s.iou);
        assert!(s.breakdown.s_v > -0.5);
    }

    #[test]
    fn snapshot_restore_is_exact() {
        let mut a = still_env(RewardWeights::default());
        for i in 0..7 {
            a.step(&[0.1 * i as f32; 6]).unwrap();
        }
        let snap = a.snapshot();
        let mut b = still_env(RewardWeights::default());
        b.restore(&snap);
        for _ in 0..8 {
            assert_eq!(a.step(&[0.3; 6]).unwrap(), b.step(&[0.3; 6]).unwrap());
        }
    }

    #[test]
    fn mismatched_camera_is_config_error() {
        let sim = Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap();
        let cam = Camera::default();
        let expert = generate_synthetic_expert(&sim, &GaitScript::still(6, 0.2), &cam, 25.0, 0).unwrap();
        let mut enc = BuiltinEncoder::new(EncoderParams::default());
        let reference = Reference::prepare(&expert.video, &mut enc, ClipPadding::Clamp).unwrap();
        let small = Camera { height: 32, width: 32, ..cam };
        let r = ImitationEnv::new(sim, small, reference, enc, RewardWeights::default(), ClipPadding::Clamp, EnvConfig::default());
        assert!(matches!(r, Err(EnvError::Config(_))));
    }
}
