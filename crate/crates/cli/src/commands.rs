//! The subcommands, usable both from the binary and from tests.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mimic_core::checkpoint::{decode_policy, encode_policy, encode_replay, load_replay};
use mimic_core::encoder::{assemble_clip, ClipEncoder, Embedding};
use mimic_core::env::{ImitationEnv, Reference};
use mimic_core::nn::GradCheckReport;
use mimic_core::physics::{SimConfig, Simulator};
use mimic_core::reward::{combined_reward, mask_iou, video_similarity, RegTerms, RewardBreakdown, CSV_HEADER};
use mimic_core::sac::{grad_check_suite, PolicyState};
use mimic_core::trainer::{
    evaluate, record_episode, EvalMetrics, EvalSummary, ResumeState, TrainObserver, Trainer, EVAL_SEED_BASE,
    METRICS_HEADER,
};
use mimic_core::video::{
    build_prompt, generate_synthetic_expert, load_video, save_video, segment_by_threshold, VideoSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ReferenceSource, RunConfig};
use crate::{CliError, Encoder};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REWARDS_FILE: &str = "rewards.csv";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const REPLAY_FILE: &str = "replay.bin";
pub const RESUME_FILE: &str = "resume.json";
pub const FINAL_EVAL_FILE: &str = "final_eval.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_atomic(path, (text + "\n").as_bytes())
}

pub fn simulator(cfg: &RunConfig) -> Result<Simulator, CliError> {
    Simulator::new(cfg.morphology_spec()?, SimConfig::default()).map_err(|e| CliError::Config(e.to_string()))
}

fn segmented(video: VideoSequence, threshold: u8) -> VideoSequence {
    if video.masks.is_some() {
        video
    } else {
        segment_by_threshold(&video, threshold)
    }
}

/// The reference video and, for synthetic experts, the expert's forward displacement.
pub fn reference_video(cfg: &RunConfig, sim: &Simulator) -> Result<(VideoSequence, Option<f64>), CliError> {
    match cfg.reference_source()? {
        ReferenceSource::Gait(script) => {
            let expert = generate_synthetic_expert(sim, &script, &cfg.camera, cfg.fps, cfg.expert_seed)?;
            let disp = expert.forward_displacement();
            Ok((expert.video, Some(disp)))
        }
        ReferenceSource::Video(dir) => {
            let video = segmented(load_video(&dir)?, cfg.segment_threshold);
            if video.resolution() != (cfg.camera.height, cfg.camera.width) {
                return Err(CliError::Config(format!(
                    "reference video is {:?} but the camera renders {}x{}",
                    video.resolution(),
                    cfg.camera.height,
                    cfg.camera.width
                )));
            }
            Ok((video, None))
        }
    }
}

pub fn build_env(cfg: &RunConfig) -> Result<(ImitationEnv<Encoder>, Option<f64>), CliError> {
    cfg.validate()?;
    let sim = simulator(cfg)?;
    let (video, disp) = reference_video(cfg, &sim)?;
    let mut encoder = Encoder::open(cfg.bridge.as_deref(), &cfg.encoder, cfg.bridge_timeout_secs)?;
    let reference = Reference::prepare(&video, &mut encoder, cfg.encoder.padding)?;
    let env = ImitationEnv::new(
        sim,
        cfg.camera.clone(),
        reference,
        encoder,
        cfg.weights.clone(),
        cfg.encoder.padding,
        cfg.env.clone(),
    )?;
    Ok((env, disp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenExpertReport {
    pub prompt: String,
    pub frames: usize,
    pub displacement: f64,
    pub directory: PathBuf,
}

/// Renders the scripted expert into `out`.
pub fn gen_expert(cfg: &RunConfig, out: &Path) -> Result<GenExpertReport, CliError> {
    cfg.validate()?;
    let ReferenceSource::Gait(script) = cfg.reference_source()? else {
        return Err(CliError::Config("gen-expert needs a gait:<script> reference".into()));
    };
    let sim = simulator(cfg)?;
    let expert = generate_synthetic_expert(&sim, &script, &cfg.camera, cfg.fps, cfg.expert_seed)?;
    save_video(out, &expert.video)?;
    Ok(GenExpertReport {
        prompt: build_prompt(&expert.video.task, &expert.video.embodiment)?,
        frames: expert.video.len(),
        displacement: expert.forward_displacement(),
        directory: out.to_path_buf(),
    })
}

/// Saved alongside a checkpoint: trainer state plus the CSV lengths at that point.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeFile {
    trainer: ResumeState,
    evaluations: u64,
    metrics_len: u64,
    rewards_len: u64,
}

struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    rewards: BufWriter<File>,
    evaluations: u64,
    checkpoint_every: u64,
    save_replay: bool,
    error: Option<CliError>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        let open = |name: &str, header: &str| -> Result<BufWriter<File>, CliError> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
            writeln!(w, "{header}").map_err(|e| CliError::io(&path, e))?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE, METRICS_HEADER)?,
            rewards: open(REWARDS_FILE, &format!("episode,{CSV_HEADER}"))?,
            evaluations: 0,
            checkpoint_every: cfg.checkpoint_every,
            save_replay: cfg.save_replay,
            error: None,
        })
    }

    /// Reopens the CSVs truncated to their length at the last checkpoint.
    fn reopen(dir: &Path, cfg: &RunConfig, saved: &ResumeFile) -> Result<Self, CliError> {
        let open = |name: &str, len: u64| -> Result<BufWriter<File>, CliError> {
            let path = dir.join(name);
            let file = OpenOptions::new().append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
            file.set_len(len).map_err(|e| CliError::io(&path, e))?;
            Ok(BufWriter::new(file))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE, saved.metrics_len)?,
            rewards: open(REWARDS_FILE, saved.rewards_len)?,
            evaluations: saved.evaluations,
            checkpoint_every: cfg.checkpoint_every,
            save_replay: cfg.save_replay,
            error: None,
        })
    }

    fn flush(&mut self) -> Result<(u64, u64), CliError> {
        let len = |w: &mut BufWriter<File>, name: &str| -> Result<u64, CliError> {
            let path = self.dir.join(name);
            w.flush().map_err(|e| CliError::io(&path, e))?;
            Ok(w.get_ref().metadata().map_err(|e| CliError::io(&path, e))?.len())
        };
        let m = len(&mut self.metrics, METRICS_FILE)?;
        let r = len(&mut self.rewards, REWARDS_FILE)?;
        Ok((m, r))
    }

    fn checkpoint<E: ClipEncoder>(&mut self, trainer: &Trainer<E>) -> Result<(), CliError> {
        let (metrics_len, rewards_len) = self.flush()?;
        write_atomic(&self.dir.join(POLICY_FILE), &encode_policy(&trainer.policy))?;
        if self.save_replay {
            write_atomic(&self.dir.join(REPLAY_FILE), &encode_replay(&trainer.buffer))?;
        }
        let resume =
            ResumeFile { trainer: trainer.resume_state(), evaluations: self.evaluations, metrics_len, rewards_len };
        write_json(&self.dir.join(RESUME_FILE), &resume)?;
        log::info!("checkpoint at step {}", trainer.env_steps());
        Ok(())
    }
}

impl TrainObserver for RunFiles {
    fn on_frame(&mut self, episode: u64, b: &RewardBreakdown) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.rewards, "{episode},{}", b.csv_row()) {
                self.error = Some(CliError::io(&self.dir.join(REWARDS_FILE), e));
            }
        }
    }

    fn on_eval<E: ClipEncoder>(&mut self, trainer: &Trainer<E>, m: &EvalMetrics) -> bool {
        if self.error.is_some() {
            return false;
        }
        if let Err(e) = writeln!(self.metrics, "{}", m.csv_row()) {
            self.error = Some(CliError::io(&self.dir.join(METRICS_FILE), e));
            return false;
        }
        self.evaluations += 1;
        if self.evaluations % self.checkpoint_every == 0 {
            if let Err(e) = self.checkpoint(trainer) {
                self.error = Some(e);
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub episodes: u64,
    /// Forward displacement of the synthetic expert, when there is one.
    pub expert_displacement: Option<f64>,
    pub final_eval: EvalSummary,
}

/// Trains into `cfg.output`, or continues the run saved there when `resume` is set.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainReport, CliError> {
    let (env, expert_displacement) = build_env(cfg)?;
    let dir = cfg.output.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let (mut trainer, mut files) = if resume {
        let path = dir.join(RESUME_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let saved: ResumeFile =
            serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        let replay_path = dir.join(REPLAY_FILE);
        if !replay_path.is_file() {
            return Err(CliError::Config("run was saved without its replay buffer and cannot be resumed".into()));
        }
        let policy_path = dir.join(POLICY_FILE);
        let bytes = fs::read(&policy_path).map_err(|e| CliError::io(&policy_path, e))?;
        let policy = decode_policy(&bytes, cfg.trainer.sac.adam)?;
        let buffer = load_replay(&replay_path)?;
        let files = RunFiles::reopen(&dir, cfg, &saved)?;
        let trainer = Trainer::resume(cfg.trainer_config(), env, policy, buffer, saved.trainer)?;
        log::info!("resuming at step {}", trainer.env_steps());
        (trainer, files)
    } else {
        write_json(&dir.join(CONFIG_FILE), cfg)?;
        let files = RunFiles::create(&dir, cfg)?;
        (Trainer::new(cfg.trainer_config(), env)?, files)
    };
    let result = trainer.run(&mut files);
    if let Some(e) = files.error.take() {
        return Err(e);
    }
    result?;
    files.checkpoint(&trainer)?;
    let final_eval = trainer.evaluate(cfg.eval_episodes)?;
    let report = TrainReport {
        steps: trainer.env_steps(),
        episodes: trainer.episodes(),
        expert_displacement,
        final_eval,
    };
    write_json(&dir.join(FINAL_EVAL_FILE), &report)?;
    Ok(report)
}

/// Deterministic evaluation of a checkpoint; the first episode is saved as a
/// video when `video_out` is given.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    video_out: Option<&Path>,
) -> Result<EvalSummary, CliError> {
    let (mut env, _) = build_env(cfg)?;
    let bytes = fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let policy: PolicyState = decode_policy(&bytes, cfg.trainer.sac.adam)?;
    if policy.obs_dim != env.obs_dim() || policy.act_dim != env.act_dim() {
        return Err(CliError::Format(format!(
            "checkpoint expects {} observations and {} actions, the environment has {} and {}",
            policy.obs_dim,
            policy.act_dim,
            env.obs_dim(),
            env.act_dim()
        )));
    }
    let summary = evaluate(&mut env, &policy, episodes)?;
    if let Some(dir) = video_out {
        let (_, _, frames) = record_episode(&mut env, &policy, EVAL_SEED_BASE)?;
        let morph = env.simulator().morphology();
        let video = VideoSequence {
            frames,
            masks: None,
            fps: env.reference().fps,
            task: "rollout".into(),
            embodiment: morph.name.clone(),
        };
        save_video(dir, &segment_by_threshold(&video, 0))?;
    }
    Ok(summary)
}

fn embed(video: &VideoSequence, encoder: &mut Encoder, cfg: &RunConfig) -> Result<Vec<Embedding>, CliError> {
    let frames = video.masked_frames();
    (0..frames.len())
        .map(|t| Ok(encoder.encode(&assemble_clip(&frames, t, cfg.encoder.padding)?)?))
        .collect()
}

/// Per-frame reward breakdown of a stored rollout against a stored reference.
/// Rollout frame `t` is compared with reference frame `min(t, n - 1)`; the
/// regularization terms need simulator state and are reported as zero.
pub fn score(cfg: &RunConfig, rollout: &Path, reference: &Path) -> Result<String, CliError> {
    let ro = segmented(load_video(rollout)?, cfg.segment_threshold);
    let re = segmented(load_video(reference)?, cfg.segment_threshold);
    if ro.resolution() != re.resolution() {
        return Err(CliError::Format(format!(
            "resolution mismatch: rollout {:?}, reference {:?}",
            ro.resolution(),
            re.resolution()
        )));
    }
    let mut encoder = Encoder::open(cfg.bridge.as_deref(), &cfg.encoder, cfg.bridge_timeout_secs)?;
    let z_ro = embed(&ro, &mut encoder, cfg)?;
    let z_re = embed(&re, &mut encoder, cfg)?;
    let (m_ro, m_re) = (ro.masks.as_ref().expect("segmented"), re.masks.as_ref().expect("segmented"));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for t in 0..ro.len() {
        let j = t.min(re.len() - 1);
        let s_v = video_similarity(&z_ro[t], &z_re[j]).map_err(|e| CliError::Config(e.to_string()))?;
        let s_m = mask_iou(&m_ro[t], &m_re[j]).map_err(|e| CliError::Format(e.to_string()))?;
        let row = combined_reward(s_v, s_m, RegTerms::default(), &cfg.weights, j, t);
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    Ok(out)
}

/// Finite-difference checks of the actor, critic and temperature losses.
pub fn grad_check(seeds: u64, eps: f64, tolerance: f64) -> Vec<(u64, [GradCheckReport; 3])> {
    (0..seeds).map(|s| (s, grad_check_suite(s, eps, tolerance))).collect()
}

/// Mean absolute weighted contribution of one reward term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMagnitude {
    pub term: String,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub episodes: usize,
    pub frames: usize,
    pub terms: Vec<TermMagnitude>,
    /// Largest over smallest nonzero magnitude.
    pub spread: f64,
}

/// Weighted reward-term magnitudes over the first `frames` frames after reset
/// under uniformly random commands.
pub fn calibrate(cfg: &RunConfig, episodes: usize, frames: usize) -> Result<CalibrationReport, CliError> {
    if episodes == 0 || frames == 0 {
        return Err(CliError::Config("calibrate needs at least one episode and one frame".into()));
    }
    let (mut env, _) = build_env(cfg)?;
    let w = cfg.weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sums = [0.0f64; 7];
    let mut count = 0usize;
    for ep in 0..episodes {
        env.reset(cfg.seed.wrapping_add(ep as u64));
        let mut scored = 0;
        while scored < frames {
            let cmd: Vec<f32> = (0..env.act_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let out = env.step(&cmd)?;
            if let Some(s) = out.score {
                let b = s.breakdown;
                let r = b.reg;
                let terms = [w.alpha * b.s_v, w.beta * b.s_m, w.gamma_reg * r.p_j, w.gamma_reg * r.p_a];
                let more = [w.gamma_reg * r.p_v, w.gamma_reg * r.p_f, w.gamma_reg * r.p_s];
                for (acc, v) in sums.iter_mut().zip(terms.iter().chain(&more)) {
                    *acc += v.abs();
                }
                count += 1;
                scored += 1;
            }
            if out.terminal || out.truncated {
                break;
            }
        }
    }
    let names = ["s_v", "s_m", "p_j", "p_a", "p_v", "p_f", "p_s"];
    let terms: Vec<TermMagnitude> = names
        .iter()
        .zip(sums)
        .map(|(n, s)| TermMagnitude { term: n.to_string(), mean_abs: s / count as f64 })
        .collect();
    let nonzero: Vec<f64> = terms.iter().map(|t| t.mean_abs).filter(|&m| m > 0.0).collect();
    let spread = if nonzero.is_empty() {
        0.0
    } else {
        nonzero.iter().cloned().fold(f64::MIN, f64::max) / nonzero.iter().cloned().fold(f64::MAX, f64::min)
    };
    Ok(CalibrationReport { episodes, frames, terms, spread })
}
