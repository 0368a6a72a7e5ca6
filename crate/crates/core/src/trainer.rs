//! Training loop, evaluation and metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::ClipEncoder;
use crate::env::{EnvError, EnvSnapshot, ImitationEnv};
use crate::physics::SimError;
use crate::render::Frame;
use crate::reward::RewardBreakdown;
use crate::sac::{LossReport, PolicyState, ReplayBuffer, SacConfig, SacError};

/// Evaluation episodes reset with seeds starting here, away from training seeds.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Sac(SacError::NumericalDivergence(_)) | TrainError::Env(EnvError::Sim(SimError::NonFiniteState { .. }))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub total_steps: u64,
    /// Uniform-random actions and no updates before this many steps.
    pub warmup_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Set by the caller; not part of the serialized config.
    #[serde(skip)]
    pub seed: u64,
    pub sac: SacConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            warmup_steps: 5_000,
            eval_interval: 25_000,
            eval_episodes: 3,
            seed: 0,
            sac: SacConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.sac.validate().map_err(TrainError::Config)?;
        if self.eval_interval == 0 {
            return Err(TrainError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }
}

/// One deterministic-policy episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    /// Mean IoU over all reference frames; frames after a fall count as 0.
    pub mean_iou: f64,
    /// Torso x at the end minus torso x at reset, metres.
    pub displacement: f64,
    pub episode_return: f64,
    pub steps: usize,
    pub fell: bool,
    pub mean_breakdown: BreakdownMeans,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownMeans {
    pub s_v: f64,
    pub s_m: f64,
    pub p_j: f64,
    pub p_a: f64,
    pub p_v: f64,
    pub p_f: f64,
    pub p_s: f64,
    pub p_total: f64,
    pub r_total: f64,
}

impl BreakdownMeans {
    pub fn of(rows: &[RewardBreakdown]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let m = |f: fn(&RewardBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            s_v: m(|r| r.s_v),
            s_m: m(|r| r.s_m),
            p_j: m(|r| r.reg.p_j),
            p_a: m(|r| r.reg.p_a),
            p_v: m(|r| r.reg.p_v),
            p_f: m(|r| r.reg.p_f),
            p_s: m(|r| r.reg.p_s),
            p_total: m(|r| r.reg.total),
            r_total: m(|r| r.r_total),
        }
    }
}

/// Runs one deterministic episode from `reset(seed)`. Returns the report and
/// the per-frame breakdowns; rendered frames stay available in the env.
pub fn run_episode<E: ClipEncoder>(
    env: &mut ImitationEnv<E>,
    policy: &PolicyState,
    seed: u64,
) -> Result<(EpisodeReport, Vec<RewardBreakdown>), TrainError> {
    let mut obs = env.reset(seed);
    let x0 = env.state().root_pos[0];
    let n = env.reference().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iou_sum = 0.0;
    let mut ret = 0.0;
    let mut rows = Vec::with_capacity(n);
    let fell = loop {
        let a = policy.act(&obs, true, &mut rng)?;
        let out = env.step(&a)?;
        if let Some(s) = out.score {
            iou_sum += s.iou;
            ret += s.step_reward * env.steps_per_frame() as f64;
            rows.push(s.breakdown);
        }
        obs = out.obs;
        if out.terminal || out.truncated {
            break out.terminal;
        }
    };
    let report = EpisodeReport {
        seed,
        mean_iou: iou_sum / n as f64,
        displacement: env.state().root_pos[0] - x0,
        episode_return: ret,
        steps: env.steps(),
        fell,
        mean_breakdown: BreakdownMeans::of(&rows),
    };
    Ok((report, rows))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeReport>,
    pub iou: Stats,
    pub displacement: Stats,
    pub episode_return: Stats,
    pub fall_rate: f64,
    pub mean_breakdown: BreakdownMeans,
}

impl EvalSummary {
    pub fn of(episodes: Vec<EpisodeReport>) -> Self {
        let col = |f: fn(&EpisodeReport) -> f64| episodes.iter().map(f).collect::<Vec<_>>();
        let n = episodes.len().max(1) as f64;
        let mean_of = |f: fn(&BreakdownMeans) -> f64| episodes.iter().map(|e| f(&e.mean_breakdown)).sum::<f64>() / n;
        let mean_breakdown = BreakdownMeans {
            s_v: mean_of(|b| b.s_v),
            s_m: mean_of(|b| b.s_m),
            p_j: mean_of(|b| b.p_j),
            p_a: mean_of(|b| b.p_a),
            p_v: mean_of(|b| b.p_v),
            p_f: mean_of(|b| b.p_f),
            p_s: mean_of(|b| b.p_s),
            p_total: mean_of(|b| b.p_total),
            r_total: mean_of(|b| b.r_total),
        };
        Self {
            iou: Stats::of(&col(|e| e.mean_iou)),
            displacement: Stats::of(&col(|e| e.displacement)),
            episode_return: Stats::of(&col(|e| e.episode_return)),
            fall_rate: episodes.iter().filter(|e| e.fell).count() as f64 / n,
            mean_breakdown,
            episodes,
        }
    }
}

/// Deterministic evaluation over `episodes` fixed seeds.
pub fn evaluate<E: ClipEncoder>(
    env: &mut ImitationEnv<E>,
    policy: &PolicyState,
    episodes: usize,
) -> Result<EvalSummary, TrainError> {
    let reports = (0..episodes as u64)
        .map(|i| run_episode(env, policy, EVAL_SEED_BASE + i).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalSummary::of(reports))
}

/// Renders the first evaluation episode and returns its frames.
pub fn record_episode<E: ClipEncoder>(
    env: &mut ImitationEnv<E>,
    policy: &PolicyState,
    seed: u64,
) -> Result<(EpisodeReport, Vec<RewardBreakdown>, Vec<Frame>), TrainError> {
    let (report, rows) = run_episode(env, policy, seed)?;
    Ok((report, rows, env.frames().to_vec()))
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: u64,
    pub episodes: u64,
    pub train_return: f64,
    pub eval_iou: f64,
    pub eval_iou_std: f64,
    pub eval_displacement: f64,
    pub eval_displacement_std: f64,
    pub eval_return: f64,
    pub eval_fall_rate: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

pub const METRICS_HEADER: &str = "step,episodes,train_return,eval_iou,eval_iou_std,eval_displacement,eval_displacement_std,eval_return,eval_fall_rate,alpha,entropy,critic_loss,actor_loss";

impl EvalMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.train_return,
            self.eval_iou,
            self.eval_iou_std,
            self.eval_displacement,
            self.eval_displacement_std,
            self.eval_return,
            self.eval_fall_rate,
            self.alpha,
            self.entropy,
            self.critic_loss,
            self.actor_loss
        )
    }
}

/// A transition waiting for its block's reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingStep {
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub next_obs: Vec<f32>,
}

/// Everything besides the policy and replay contents needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub env_steps: u64,
    pub episodes: u64,
    pub rng: ChaCha8Rng,
    pub env: EnvSnapshot,
    pub obs: Vec<f32>,
    pub pending: Vec<PendingStep>,
    pub episode_return: f64,
    pub returns_since_eval: Vec<f64>,
    pub last_losses: LossReport,
    pub metrics: Vec<EvalMetrics>,
}

/// Hooks for streaming outputs while training.
pub trait TrainObserver {
    /// Called for every scored frame of a training episode.
    fn on_frame(&mut self, _episode: u64, _breakdown: &RewardBreakdown) {}
    /// Called after each periodic evaluation. Returning `false` stops training.
    fn on_eval<E: ClipEncoder>(&mut self, _trainer: &Trainer<E>, _metrics: &EvalMetrics) -> bool {
        true
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

pub struct Trainer<E> {
    pub config: TrainerConfig,
    pub env: ImitationEnv<E>,
    pub policy: PolicyState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env_steps: u64,
    episodes: u64,
    obs: Vec<f32>,
    pending: Vec<PendingStep>,
    episode_return: f64,
    returns_since_eval: Vec<f64>,
    last_losses: LossReport,
    metrics: Vec<EvalMetrics>,
}

impl<E: ClipEncoder> Trainer<E> {
    pub fn new(config: TrainerConfig, mut env: ImitationEnv<E>) -> Result<Self, TrainError> {
        config.validate()?;
        let policy = PolicyState::new(env.obs_dim(), env.act_dim(), &config.sac, config.seed);
        let buffer = ReplayBuffer::new(config.sac.buffer_capacity, env.obs_dim(), env.act_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
        let obs = env.reset(rng.random());
        Ok(Self {
            config,
            env,
            policy,
            buffer,
            rng,
            env_steps: 0,
            episodes: 0,
            obs,
            pending: Vec::new(),
            episode_return: 0.0,
            returns_since_eval: Vec::new(),
            last_losses: LossReport::default(),
            metrics: Vec::new(),
        })
    }

    /// Continues a run from a saved policy, replay buffer and resume state.
    pub fn resume(
        config: TrainerConfig,
        mut env: ImitationEnv<E>,
        policy: PolicyState,
        buffer: ReplayBuffer,
        state: ResumeState,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if policy.obs_dim != env.obs_dim() || policy.act_dim != env.act_dim() {
            return Err(TrainError::Config("checkpoint does not match the environment".into()));
        }
        if buffer.dims() != (env.obs_dim(), env.act_dim()) {
            return Err(TrainError::Config("replay buffer does not match the environment".into()));
        }
        env.restore(&state.env);
        Ok(Self {
            config,
            env,
            policy,
            buffer,
            rng: state.rng,
            env_steps: state.env_steps,
            episodes: state.episodes,
            obs: state.obs,
            pending: state.pending,
            episode_return: state.episode_return,
            returns_since_eval: state.returns_since_eval,
            last_losses: state.last_losses,
            metrics: state.metrics,
        })
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            env_steps: self.env_steps,
            episodes: self.episodes,
            rng: self.rng.clone(),
            env: self.env.snapshot(),
            obs: self.obs.clone(),
            pending: self.pending.clone(),
            episode_return: self.episode_return,
            returns_since_eval: self.returns_since_eval.clone(),
            last_losses: self.last_losses,
            metrics: self.metrics.clone(),
        }
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn metrics(&self) -> &[EvalMetrics] {
        &self.metrics
    }

    fn start_episode(&mut self) {
        self.pending.clear();
        self.episode_return = 0.0;
        let seed = self.rng.random();
        self.obs = self.env.reset(seed);
    }

    /// One environment step plus, after warmup, one gradient update.
    pub fn step(&mut self, observer: &mut impl TrainObserver) -> Result<(), TrainError> {
        let action: Vec<f32> = if self.env_steps < self.config.warmup_steps {
            (0..self.env.act_dim()).map(|_| self.rng.random_range(-1.0f32..=1.0)).collect()
        } else {
            self.policy.act(&self.obs, false, &mut self.rng)?
        };
        self.env_steps += 1;
        let out = match self.env.step(&action) {
            Ok(out) => out,
            Err(EnvError::Sim(SimError::NonFiniteState { time })) => {
                log::warn!("non-finite physics state at t = {time:.3}; discarding the partial block");
                self.episodes += 1;
                self.start_episode();
                return self.maybe_update();
            }
            Err(e) => return Err(e.into()),
        };
        self.pending.push(PendingStep { obs: std::mem::take(&mut self.obs), action, next_obs: out.obs.clone() });
        if let Some(score) = out.score {
            let last = self.pending.len() - 1;
            for (i, p) in self.pending.drain(..).enumerate() {
                let done = out.terminal && i == last;
                self.buffer.push(&p.obs, &p.action, score.step_reward as f32, &p.next_obs, done);
                self.episode_return += score.step_reward;
            }
            observer.on_frame(self.episodes, &score.breakdown);
        }
        if out.terminal || out.truncated {
            self.returns_since_eval.push(self.episode_return);
            self.episodes += 1;
            self.start_episode();
        } else {
            self.obs = out.obs;
        }
        self.maybe_update()
    }

    fn maybe_update(&mut self) -> Result<(), TrainError> {
        let batch = self.config.sac.batch_size;
        if self.env_steps > self.config.warmup_steps && self.buffer.len() >= batch {
            let b = self.buffer.sample(batch, &mut self.rng);
            self.last_losses = self.policy.update(&b, &self.config.sac, &mut self.rng)?;
        }
        Ok(())
    }

    /// Deterministic evaluation that leaves the training episode untouched.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalSummary, TrainError> {
        let snap = self.env.snapshot();
        let summary = evaluate(&mut self.env, &self.policy, episodes);
        self.env.restore(&snap);
        summary
    }

    fn record_metrics(&mut self) -> Result<EvalMetrics, TrainError> {
        let summary = self.evaluate(self.config.eval_episodes)?;
        let train_return = Stats::of(&self.returns_since_eval).mean;
        self.returns_since_eval.clear();
        let m = EvalMetrics {
            step: self.env_steps,
            episodes: self.episodes,
            train_return,
            eval_iou: summary.iou.mean,
            eval_iou_std: summary.iou.std,
            eval_displacement: summary.displacement.mean,
            eval_displacement_std: summary.displacement.std,
            eval_return: summary.episode_return.mean,
            eval_fall_rate: summary.fall_rate,
            alpha: self.policy.alpha(),
            entropy: self.last_losses.entropy,
            critic_loss: self.last_losses.critic_loss,
            actor_loss: self.last_losses.actor_loss,
        };
        log::info!(
            "step {:>7}  episodes {:>5}  iou {:.3}  disp {:+.2} m  return {:.1}  alpha {:.4}",
            m.step,
            m.episodes,
            m.eval_iou,
            m.eval_displacement,
            m.eval_return,
            m.alpha
        );
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Trains until `total_steps`, evaluating every `eval_interval` steps.
    pub fn run(&mut self, observer: &mut impl TrainObserver) -> Result<(), TrainError> {
        while self.env_steps < self.config.total_steps {
            self.step(observer)?;
            if self.env_steps % self.config.eval_interval == 0 {
                let m = self.record_metrics()?;
                if !observer.on_eval(self, &m) {
                    break;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BuiltinEncoder, ClipPadding, EncoderParams};
    use crate::env::{EnvConfig, Reference};
    use crate::physics::{MorphologySpec, SimConfig, Simulator};
    use crate::render::Camera;
    use crate::reward::RewardWeights;
    use crate::video::{generate_synthetic_expert, GaitScript};

    fn env(weights: RewardWeights) -> ImitationEnv<BuiltinEncoder> {
        let sim = Simulator::new(MorphologySpec::hopper2d(), SimConfig::default()).unwrap();
        let cam = Camera { height: 32, width: 32, ..Camera::default() };
        let mut script = GaitScript::hopper_gait_v1();
        script.duration = 0.4;
        let expert = generate_synthetic_expert(&sim, &script, &cam, 25.0, 0).unwrap();
        let mut enc = BuiltinEncoder::new(EncoderParams::default());
        let reference = Reference::prepare(&expert.video, &mut enc, ClipPadding::Clamp).unwrap();
        ImitationEnv::new(sim, cam, reference, enc, weights, ClipPadding::Clamp, EnvConfig::default()).unwrap()
    }

    fn small_config(total: u64) -> TrainerConfig {
        TrainerConfig {
            total_steps: total,
            warmup_steps: 100,
            eval_interval: 100,
            eval_episodes: 1,
            seed: 3,
            sac: SacConfig { hidden: vec![16, 16], batch_size: 32, buffer_capacity: 10_000, ..Default::default() },
        }
    }

    struct Collect(Vec<(u64, RewardBreakdown)>);

    impl TrainObserver for Collect {
        fn on_frame(&mut self, episode: u64, b: &RewardBreakdown) {
            self.0.push((episode, *b));
        }
    }

    #[test]
    fn zero_steps_returns_initial_policy() {
        let cfg = small_config(0);
        let mut t = Trainer::new(cfg.clone(), env(RewardWeights::default())).unwrap();
        t.run(&mut NoObserver).unwrap();
        assert!(t.metrics().is_empty());
        assert_eq!(t.policy, PolicyState::new(t.env.obs_dim(), t.env.act_dim(), &cfg.sac, cfg.seed));
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let mut t = Trainer::new(small_config(300), env(RewardWeights::default())).unwrap();
            t.run(&mut NoObserver).unwrap();
            (t.metrics().to_vec(), t.policy.clone())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn replay_rewards_repeat_frame_rewards() {
        let mut t = Trainer::new(small_config(200), env(RewardWeights::default())).unwrap();
        let mut obs = Collect(Vec::new());
        t.run(&mut obs).unwrap();
        let k = t.env.steps_per_frame();
        // rewards in the buffer come in runs of k equal values, one per frame
        assert_eq!(t.buffer.len(), k * obs.0.len());
        for (f, (_, b)) in obs.0.iter().enumerate() {
            for i in 0..k {
                assert_eq!(t.buffer.reward(f * k + i), b.r_total as f32);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut full = Trainer::new(small_config(400), env(RewardWeights::default())).unwrap();
        full.run(&mut NoObserver).unwrap();

        let mut first = Trainer::new(small_config(250), env(RewardWeights::default())).unwrap();
        first.run(&mut NoObserver).unwrap();
        let state = first.resume_state();
        let policy = crate::checkpoint::decode_policy(&crate::checkpoint::encode_policy(&first.policy), first.config.sac.adam).unwrap();
        let buffer = crate::checkpoint::decode_replay(&crate::checkpoint::encode_replay(&first.buffer)).unwrap();
        let json = serde_json::to_string(&state).unwrap();
        let state: ResumeState = serde_json::from_str(&json).unwrap();
        let mut second = Trainer::resume(small_config(400), env(RewardWeights::default()), policy, buffer, state).unwrap();
        second.run(&mut NoObserver).unwrap();
        assert_eq!(second.metrics(), full.metrics());
        assert_eq!(second.policy, full.policy);
    }
}
