//! Reference-video handling: on-disk format, threshold segmentation and
//! scripted synthetic experts.
//!
//! A video directory holds
//!
//! ```text
//! meta.json            {"fps": 25.0, "width": 64, "height": 64, "n": 125,
//!                       "has_masks": true, "task": "walking", "embodiment": "walker2d"}
//! frame_00000.pgm ...  binary PGM (P5), 8-bit, row-major, one per frame
//! mask_00000.pgm  ...  optional, same geometry, 0 = background, 255 = agent
//! ```
//!
//! `task` and `embodiment` are optional on load. Mask files produced by an
//! external segmenter may use any maxval; a pixel is agent when `2 v > maxval`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{Action, SimError, SimState, Simulator};
use crate::render::{render_frame, render_mask, Camera, Frame, Mask};

/// Physics step used when generating synthetic experts.
pub const EXPERT_DT: f64 = 0.002;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("missing frame {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },
    #[error("gait is unstable: agent fell at t = {time:.3} s")]
    UnstableGait { time: f64 },
    #[error("invalid gait script: {0}")]
    InvalidScript(String),
    #[error("prompt field '{0}' is empty")]
    EmptyField(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VideoError + '_ {
    move |source| VideoError::Io { path: path.to_path_buf(), source }
}

/// Decoded 8-bit PGM image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, VideoError> {
    let fmt = |m: &str| VideoError::Format(format!("pgm: {m}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fmt("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments may precede each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fmt("header not terminated by whitespace"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt("only 8-bit images are supported"));
    }
    let len = width * height;
    if bytes.len() - pos < len {
        return Err(fmt("truncated pixel data"));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, data: bytes[pos..pos + len].to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub has_masks: bool,
    #[serde(default)]
    pub task: String,
    #[serde(default)]
    pub embodiment: String,
}

/// Ordered grayscale frames with optional per-frame silhouettes.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<Mask>>,
    pub fps: f64,
    pub task: String,
    pub embodiment: String,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0))
    }

    pub fn meta(&self) -> VideoMeta {
        let (height, width) = self.resolution();
        VideoMeta {
            fps: self.fps,
            width,
            height,
            n: self.len(),
            has_masks: self.masks.is_some(),
            task: self.task.clone(),
            embodiment: self.embodiment.clone(),
        }
    }

    /// Frames with everything outside the silhouette zeroed; unmasked videos
    /// are returned as-is.
    pub fn masked_frames(&self) -> Vec<Frame> {
        match &self.masks {
            Some(masks) => self.frames.iter().zip(masks).map(|(f, m)| f.masked(m)).collect(),
            None => self.frames.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if self.frames.is_empty() {
            return Err(VideoError::Format("video has no frames".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(VideoError::Format(format!("fps must be positive, got {}", self.fps)));
        }
        let (h, w) = self.resolution();
        if self.frames.iter().any(|f| f.height != h || f.width != w || f.data.len() != h * w) {
            return Err(VideoError::Format("frames differ in resolution".into()));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.frames.len() {
                return Err(VideoError::Format(format!(
                    "{} masks for {} frames",
                    masks.len(),
                    self.frames.len()
                )));
            }
            if masks.iter().any(|m| m.height != h || m.width != w) {
                return Err(VideoError::Format("mask dimension differs from frame dimension".into()));
            }
        }
        Ok(())
    }
}

fn frame_path(dir: &Path, prefix: &str, index: usize) -> PathBuf {
    dir.join(format!("{prefix}_{index:05}.pgm"))
}

pub fn save_video(dir: &Path, video: &VideoSequence) -> Result<(), VideoError> {
    video.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&video.meta()).expect("meta serializes");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;
    for (i, frame) in video.frames.iter().enumerate() {
        let path = frame_path(dir, "frame", i);
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        file.write_all(&encode_pgm(frame.width, frame.height, &frame.data)).map_err(io_err(&path))?;
    }
    if let Some(masks) = &video.masks {
        for (i, mask) in masks.iter().enumerate() {
            let path = frame_path(dir, "mask", i);
            let data: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            fs::write(&path, encode_pgm(mask.width, mask.height, &data)).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn read_pgm(dir: &Path, prefix: &str, index: usize) -> Result<Pgm, VideoError> {
    let path = frame_path(dir, prefix, index);
    if !path.exists() {
        return Err(VideoError::MissingFrame { dir: dir.to_path_buf(), index });
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode_pgm(&bytes).map_err(|e| VideoError::Format(format!("{}: {e}", path.display())))
}

pub fn load_video(dir: &Path) -> Result<VideoSequence, VideoError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: VideoMeta =
        serde_json::from_str(&text).map_err(|e| VideoError::Format(format!("meta.json: {e}")))?;
    if meta.n == 0 {
        return Err(VideoError::Format("meta.json declares zero frames".into()));
    }
    let check_dims = |pgm: &Pgm, what: &str, i: usize| {
        if pgm.width != meta.width || pgm.height != meta.height {
            Err(VideoError::Format(format!(
                "{what} {i} is {}x{}, expected {}x{}",
                pgm.width, pgm.height, meta.width, meta.height
            )))
        } else {
            Ok(())
        }
    };
    let mut frames = Vec::with_capacity(meta.n);
    for i in 0..meta.n {
        let pgm = read_pgm(dir, "frame", i)?;
        check_dims(&pgm, "frame", i)?;
        let data = if pgm.maxval == 255 {
            pgm.data
        } else {
            let max = pgm.maxval as u32;
            pgm.data.iter().map(|&v| ((v.min(max as u8) as u32 * 255 + max / 2) / max) as u8).collect()
        };
        frames.push(Frame { width: pgm.width, height: pgm.height, data, index: i });
    }
    let masks = if meta.has_masks {
        let mut masks = Vec::with_capacity(meta.n);
        for i in 0..meta.n {
            let pgm = read_pgm(dir, "mask", i)?;
            check_dims(&pgm, "mask", i)?;
            let max = pgm.maxval as u32;
            let data = pgm.data.iter().map(|&v| (2 * v as u32 > max) as u8).collect();
            masks.push(Mask { width: pgm.width, height: pgm.height, data, index: i });
        }
        Some(masks)
    } else {
        None
    };
    let video = VideoSequence { frames, masks, fps: meta.fps, task: meta.task, embodiment: meta.embodiment };
    video.validate()?;
    Ok(video)
}

/// Background removal for dark-background videos: a pixel belongs to the
/// agent iff its intensity exceeds `threshold`. Frames are returned masked.
pub fn segment_by_threshold(video: &VideoSequence, threshold: u8) -> VideoSequence {
    let mut frames = Vec::with_capacity(video.len());
    let mut masks = Vec::with_capacity(video.len());
    for f in &video.frames {
        let mask_data: Vec<u8> = f.data.iter().map(|&v| (v > threshold) as u8).collect();
        let mask = Mask { width: f.width, height: f.height, data: mask_data, index: f.index };
        frames.push(f.masked(&mask));
        masks.push(mask);
    }
    VideoSequence { frames, masks: Some(masks), ..video.clone() }
}

/// `"The {embodiment} agent is {skill}, camera follows."`
pub fn build_prompt(skill: &str, embodiment: &str) -> Result<String, VideoError> {
    if skill.trim().is_empty() {
        return Err(VideoError::EmptyField("skill"));
    }
    if embodiment.trim().is_empty() {
        return Err(VideoError::EmptyField("embodiment"));
    }
    Ok(format!("The {embodiment} agent is {skill}, camera follows."))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointWave {
    /// radians
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
    /// radians
    pub phase: f64,
    /// radians
    #[serde(default)]
    pub offset: f64,
}

impl JointWave {
    pub fn target(&self, t: f64) -> f64 {
        self.offset + self.amplitude * (std::f64::consts::TAU * self.frequency * t + self.phase).sin()
    }
}

fn default_kp() -> f64 {
    80.0
}

fn default_kd() -> f64 {
    2.0
}

/// Open-loop sinusoidal joint targets tracked by a PD controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitScript {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub skill: String,
    /// seconds
    pub duration: f64,
    pub joints: Vec<JointWave>,
    #[serde(default = "default_kp")]
    pub kp: f64,
    #[serde(default = "default_kd")]
    pub kd: f64,
}

impl GaitScript {
    pub fn from_json(text: &str) -> Result<Self, VideoError> {
        serde_json::from_str(text).map_err(|e| VideoError::InvalidScript(e.to_string()))
    }

    /// The shipped biped walking gait.
    pub fn walker_gait_v1() -> Self {
        Self::from_json(include_str!("../../../assets/gaits/walker-gait-v1.json"))
            .expect("shipped gait parses")
    }

    /// The shipped monoped hopping gait.
    pub fn hopper_gait_v1() -> Self {
        Self::from_json(include_str!("../../../assets/gaits/hopper-gait-v1.json"))
            .expect("shipped gait parses")
    }

    /// Zero-amplitude script holding the canonical pose.
    pub fn still(joints: usize, duration: f64) -> Self {
        let wave = JointWave { amplitude: 0.0, frequency: 0.0, phase: 0.0, offset: 0.0 };
        Self {
            name: "still".into(),
            skill: "standing".into(),
            duration,
            joints: vec![wave; joints],
            kp: default_kp(),
            kd: default_kd(),
        }
    }

    pub fn validate(&self, sim: &Simulator) -> Result<(), VideoError> {
        let bad = |m: String| Err(VideoError::InvalidScript(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        let joints = &sim.morphology().joints;
        if self.joints.len() != joints.len() {
            return bad(format!("{} waves for {} joints", self.joints.len(), joints.len()));
        }
        for (w, j) in self.joints.iter().zip(joints) {
            if !(w.frequency >= 0.0) {
                return bad(format!("joint '{}' has negative frequency", j.name));
            }
            let lo = w.offset - w.amplitude.abs();
            let hi = w.offset + w.amplitude.abs();
            if lo < j.limits[0] || hi > j.limits[1] {
                return bad(format!("joint '{}' targets [{lo:.3}, {hi:.3}] leave its limits", j.name));
            }
        }
        if !(self.kp >= 0.0 && self.kd >= 0.0) {
            return bad("PD gains must be non-negative".into());
        }
        Ok(())
    }

    /// PD torque toward the scripted targets at time `t`, clamped to the torque limits.
    pub fn torques(&self, sim: &Simulator, state: &SimState, t: f64) -> Action {
        let tau = self
            .joints
            .iter()
            .zip(&state.joint_angles)
            .zip(&state.joint_vels)
            .map(|((w, q), qd)| self.kp * (w.target(t) - q) - self.kd * qd)
            .collect();
        Action(tau).clamped(&sim.morphology().torque_limits())
    }
}

/// Rendered video together with the simulator state at every frame.
#[derive(Debug, Clone)]
pub struct ExpertRollout {
    pub video: VideoSequence,
    pub states: Vec<SimState>,
}

impl ExpertRollout {
    /// Torso displacement between the first and last frame, metres.
    pub fn forward_displacement(&self) -> f64 {
        match (self.states.first(), self.states.last()) {
            (Some(a), Some(b)) => b.root_pos[0] - a.root_pos[0],
            _ => 0.0,
        }
    }
}

/// Number of physics steps between frames at `fps`.
pub fn steps_per_frame(fps: f64, dt: f64) -> usize {
    ((1.0 / fps) / dt).round().max(1.0) as usize
}

/// Drives the simulator with a PD controller tracking `script` and renders one
/// frame and mask every `1/fps` seconds under a follow camera, starting from
/// `reset(seed)`.
pub fn generate_synthetic_expert(
    sim: &Simulator,
    script: &GaitScript,
    cam: &Camera,
    fps: f64,
    seed: u64,
) -> Result<ExpertRollout, VideoError> {
    script.validate(sim)?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(VideoError::InvalidScript(format!("fps must be positive, got {fps}")));
    }
    let n = (script.duration * fps).round().max(1.0) as usize;
    let substeps = steps_per_frame(fps, EXPERT_DT);
    let mut state = sim.reset(seed);
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut t = 0.0;
    for index in 0..n {
        if index > 0 {
            for _ in 0..substeps {
                let action = script.torques(sim, &state, t);
                state = sim.step(&state, &action, EXPERT_DT)?;
                t = state.time;
                if sim.is_fallen(&state) {
                    return Err(VideoError::UnstableGait { time: t });
                }
            }
        }
        let view = cam.follow(&state);
        frames.push(render_frame(sim, &state, &view).with_index(index));
        masks.push(render_mask(sim, &state, &view).with_index(index));
        states.push(state.clone());
    }
    let video = VideoSequence {
        frames,
        masks: Some(masks),
        fps,
        task: script.skill.clone(),
        embodiment: sim.morphology().name.clone(),
    };
    Ok(ExpertRollout { video, states })
}
