//! Soft actor-critic with twin critics and automatic temperature tuning.
//!
//! Actions live in `[-1, 1]^A` (tanh-squashed Gaussian); the environment maps
//! them to torques. The actor emits `A` means followed by `A` raw log-std
//! values, which are mapped smoothly into `[LOG_STD_MIN, LOG_STD_MAX]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{grad_check, Adam, AdamConfig, GradCheckReport, Mlp, Real};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SacError {
    #[error("observation has {got} entries, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("replay buffer holds {size} transitions, batch needs {batch}")]
    NotEnoughData { size: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub discount: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_temperature: f64,
    /// Defaults to `-dim(action)` when absent.
    pub target_entropy: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            batch_size: 128,
            buffer_capacity: 1_000_000,
            discount: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            init_temperature: 0.1,
            target_entropy: None,
            adam: AdamConfig::default(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(format!("hidden sizes must be non-empty and positive, got {:?}", self.hidden));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err("batch_size must be positive and at most buffer_capacity".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(format!("discount must lie in [0, 1), got {}", self.discount));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err("init_temperature must be positive".into());
        }
        Ok(())
    }

    pub fn target_entropy_for(&self, act_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(act_dim as f64))
    }
}

/// Fixed-capacity FIFO of transitions, stored column-wise in `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f32>,
    act: Vec<f32>,
    rew: Vec<f32>,
    next_obs: Vec<f32>,
    done: Vec<f32>,
    /// Slot the next push overwrites once full.
    head: usize,
    len: usize,
}

/// Borrowed view of a buffer's storage.
pub struct ReplayParts<'a> {
    pub capacity: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub head: usize,
    pub len: usize,
    pub obs: &'a [f32],
    pub act: &'a [f32],
    pub rew: &'a [f32],
    pub next_obs: &'a [f32],
    pub done: &'a [f32],
}

/// Sampled minibatch, row-major.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub size: usize,
    pub obs: Vec<f32>,
    pub act: Vec<f32>,
    pub rew: Vec<f32>,
    pub next_obs: Vec<f32>,
    pub done: Vec<f32>,
    pub indices: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            obs_dim,
            act_dim,
            obs: Vec::new(),
            act: Vec::new(),
            rew: Vec::new(),
            next_obs: Vec::new(),
            done: Vec::new(),
            head: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.obs_dim, self.act_dim)
    }

    pub fn push(&mut self, obs: &[f32], act: &[f32], rew: f32, next_obs: &[f32], done: bool) {
        assert_eq!(obs.len(), self.obs_dim);
        assert_eq!(next_obs.len(), self.obs_dim);
        assert_eq!(act.len(), self.act_dim);
        if self.len < self.capacity {
            self.obs.extend_from_slice(obs);
            self.act.extend_from_slice(act);
            self.rew.push(rew);
            self.next_obs.extend_from_slice(next_obs);
            self.done.push(done as u8 as f32);
            self.len += 1;
        } else {
            let i = self.head;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.obs[i * o..(i + 1) * o].copy_from_slice(obs);
            self.act[i * a..(i + 1) * a].copy_from_slice(act);
            self.rew[i] = rew;
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(next_obs);
            self.done[i] = done as u8 as f32;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn raw_parts(&self) -> ReplayParts<'_> {
        ReplayParts {
            capacity: self.capacity,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            head: self.head,
            len: self.len,
            obs: &self.obs,
            act: &self.act,
            rew: &self.rew,
            next_obs: &self.next_obs,
            done: &self.done,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_raw_parts(
        capacity: usize,
        obs_dim: usize,
        act_dim: usize,
        head: usize,
        len: usize,
        obs: Vec<f32>,
        act: Vec<f32>,
        rew: Vec<f32>,
        next_obs: Vec<f32>,
        done: Vec<f32>,
    ) -> Self {
        assert!(len <= capacity && head < capacity);
        assert!(obs.len() == len * obs_dim && next_obs.len() == len * obs_dim);
        assert!(act.len() == len * act_dim && rew.len() == len && done.len() == len);
        Self { capacity, obs_dim, act_dim, obs, act, rew, next_obs, done, head, len }
    }

    /// Reward stored in slot `i`.
    pub fn reward(&self, i: usize) -> f32 {
        self.rew[i]
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Batch {
        assert!(self.len > 0, "sampling from an empty buffer");
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut out = Batch {
            size: batch,
            obs: Vec::with_capacity(batch * o),
            act: Vec::with_capacity(batch * a),
            rew: Vec::with_capacity(batch),
            next_obs: Vec::with_capacity(batch * o),
            done: Vec::with_capacity(batch),
            indices: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let i = rng.random_range(0..self.len);
            out.indices.push(i);
            out.obs.extend_from_slice(&self.obs[i * o..(i + 1) * o]);
            out.act.extend_from_slice(&self.act[i * a..(i + 1) * a]);
            out.rew.push(self.rew[i]);
            out.next_obs.extend_from_slice(&self.next_obs[i * o..(i + 1) * o]);
            out.done.push(self.done[i]);
        }
        out
    }
}

/// Squashed-Gaussian sample for a batch of actor outputs.
#[derive(Debug, Clone)]
pub struct Squashed<R> {
    pub actions: Vec<R>,
    pub log_prob: Vec<R>,
    /// Per-component `tanh(raw log-std)`, kept for the backward pass.
    std_tanh: Vec<R>,
    std: Vec<R>,
}

fn log_std_of<R: Real>(raw: R) -> (R, R) {
    let t = raw.tanh();
    let lo = R::from_f64(LOG_STD_MIN);
    let half = R::from_f64(0.5 * (LOG_STD_MAX - LOG_STD_MIN));
    (lo + half * (t + R::one()), t)
}

/// `a = tanh(mean + std * eps)` and its log-density, using
/// `log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))`.
pub fn squash<R: Real>(out: &[R], eps: &[R], batch: usize, act_dim: usize) -> Squashed<R> {
    assert_eq!(out.len(), batch * 2 * act_dim);
    assert_eq!(eps.len(), batch * act_dim);
    let half_log_2pi = R::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln());
    let ln2 = R::from_f64(std::f64::consts::LN_2);
    let two = R::from_f64(2.0);
    let half = R::from_f64(0.5);
    let mut s = Squashed {
        actions: Vec::with_capacity(batch * act_dim),
        log_prob: Vec::with_capacity(batch),
        std_tanh: Vec::with_capacity(batch * act_dim),
        std: Vec::with_capacity(batch * act_dim),
    };
    for b in 0..batch {
        let row = &out[b * 2 * act_dim..(b + 1) * 2 * act_dim];
        let mut lp = R::zero();
        for i in 0..act_dim {
            let (log_std, t) = log_std_of(row[act_dim + i]);
            let std = log_std.exp();
            let e = eps[b * act_dim + i];
            let u = row[i] + std * e;
            let correction = two * (ln2 - u - (-two * u).softplus());
            lp += -half * e * e - log_std - half_log_2pi - correction;
            s.actions.push(u.tanh());
            s.std_tanh.push(t);
            s.std.push(std);
        }
        s.log_prob.push(lp);
    }
    s
}

/// Concatenates observation and action rows.
pub fn join_rows<R: Real>(obs: &[R], act: &[R], batch: usize) -> Vec<R> {
    let (o, a) = (obs.len() / batch, act.len() / batch);
    let mut x = Vec::with_capacity(batch * (o + a));
    for b in 0..batch {
        x.extend_from_slice(&obs[b * o..(b + 1) * o]);
        x.extend_from_slice(&act[b * a..(b + 1) * a]);
    }
    x
}

/// `0.5 mean (Q(s, a) - y)^2` and its parameter gradient.
pub fn critic_objective<R: Real>(q: &Mlp<R>, obs_act: &[R], target: &[R], batch: usize) -> (R, Vec<R>) {
    let tape = q.forward(obs_act, batch);
    let inv_b = R::one() / R::from_f64(batch as f64);
    let mut loss = R::zero();
    let dy: Vec<R> = tape
        .output()
        .iter()
        .zip(target)
        .map(|(&v, &y)| {
            let d = v - y;
            loss += R::from_f64(0.5) * d * d * inv_b;
            d * inv_b
        })
        .collect();
    let mut grad = vec![R::zero(); q.num_params()];
    q.backward(&tape, &dy, &mut grad, false);
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct ActorObjective<R> {
    pub loss: R,
    pub grad: Vec<R>,
    pub log_prob: Vec<R>,
}

/// `mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))` with reparameterized
/// `a = tanh(mean + std * eps)`, and its gradient w.r.t. the actor parameters.
#[allow(clippy::too_many_arguments)]
pub fn actor_objective<R: Real>(
    actor: &Mlp<R>,
    q1: &Mlp<R>,
    q2: &Mlp<R>,
    obs: &[R],
    eps: &[R],
    alpha: R,
    batch: usize,
    act_dim: usize,
) -> ActorObjective<R> {
    let obs_dim = obs.len() / batch;
    let tape = actor.forward(obs, batch);
    let s = squash(tape.output(), eps, batch, act_dim);
    let x = join_rows(obs, &s.actions, batch);
    let t1 = q1.forward(&x, batch);
    let t2 = q2.forward(&x, batch);
    let inv_b = R::one() / R::from_f64(batch as f64);
    let mut loss = R::zero();
    let mut dy1 = vec![R::zero(); batch];
    let mut dy2 = vec![R::zero(); batch];
    for b in 0..batch {
        let (v1, v2) = (t1.output()[b], t2.output()[b]);
        let qmin = if v1 <= v2 {
            dy1[b] = -inv_b;
            v1
        } else {
            dy2[b] = -inv_b;
            v2
        };
        loss += (alpha * s.log_prob[b] - qmin) * inv_b;
    }
    let mut scratch1 = vec![R::zero(); q1.num_params()];
    let mut scratch2 = vec![R::zero(); q2.num_params()];
    let dx1 = q1.backward(&t1, &dy1, &mut scratch1, true).unwrap();
    let dx2 = q2.backward(&t2, &dy2, &mut scratch2, true).unwrap();

    let two = R::from_f64(2.0);
    let half_range = R::from_f64(0.5 * (LOG_STD_MAX - LOG_STD_MIN));
    let width = obs_dim + act_dim;
    let mut d_out = vec![R::zero(); batch * 2 * act_dim];
    for b in 0..batch {
        for i in 0..act_dim {
            let k = b * act_dim + i;
            let a = s.actions[k];
            // d(-Qmin)/da, already scaled by 1/B
            let dq_da = dx1[b * width + obs_dim + i] + dx2[b * width + obs_dim + i];
            // dL/du: alpha d(logpi)/du = 2 a alpha; d(-Q)/du = dq_da (1 - a^2)
            let g_u = alpha * two * a * inv_b + dq_da * (R::one() - a * a);
            let e = eps[k];
            let g_log_std = g_u * s.std[k] * e - alpha * inv_b;
            let t = s.std_tanh[k];
            d_out[b * 2 * act_dim + i] = g_u;
            d_out[b * 2 * act_dim + act_dim + i] = g_log_std * half_range * (R::one() - t * t);
        }
    }
    let mut grad = vec![R::zero(); actor.num_params()];
    actor.backward(&tape, &d_out, &mut grad, false);
    ActorObjective { loss, grad, log_prob: s.log_prob }
}

/// `-log_alpha * mean(log pi + target_entropy)` and its derivative.
pub fn temperature_objective<R: Real>(log_alpha: R, log_prob: &[R], target_entropy: R) -> (R, R) {
    let n = R::from_f64(log_prob.len() as f64);
    let mut m = R::zero();
    for &lp in log_prob {
        m += lp + target_entropy;
    }
    m = m / n;
    (-log_alpha * m, -m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    /// `-mean(log pi)` of the actor's fresh samples.
    pub entropy: f64,
    pub mean_q: f64,
}

/// Learner state: networks, temperature, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub actor: Mlp<f32>,
    pub q1: Mlp<f32>,
    pub q2: Mlp<f32>,
    pub q1_target: Mlp<f32>,
    pub q2_target: Mlp<f32>,
    pub log_alpha: f32,
    pub actor_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
    pub alpha_opt: Adam,
    /// Gradient updates performed.
    pub step: u64,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

const ACTOR_OUTPUT_INIT_SCALE: f32 = 0.01;

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl PolicyState {
    pub fn new(obs_dim: usize, act_dim: usize, cfg: &SacConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = Mlp::new(&sizes(obs_dim, &cfg.hidden, 2 * act_dim), &mut rng);
        // start from near-zero commands
        actor.scale_output_layer(ACTOR_OUTPUT_INIT_SCALE);
        let q1 = Mlp::new(&sizes(obs_dim + act_dim, &cfg.hidden, 1), &mut rng);
        let q2 = Mlp::new(&sizes(obs_dim + act_dim, &cfg.hidden, 1), &mut rng);
        let (na, nq) = (actor.num_params(), q1.num_params());
        Self {
            obs_dim,
            act_dim,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha: cfg.init_temperature.ln() as f32,
            actor_opt: Adam::new(na, cfg.adam),
            q1_opt: Adam::new(nq, cfg.adam),
            q2_opt: Adam::new(nq, cfg.adam),
            alpha_opt: Adam::new(1, cfg.adam),
            step: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        (self.log_alpha as f64).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.q1.is_finite()
            && self.q2.is_finite()
            && self.q1_target.is_finite()
            && self.q2_target.is_finite()
            && self.log_alpha.is_finite()
    }

    /// Normalized action in `[-1, 1]^A`. Deterministic mode returns the squashed mean.
    pub fn act(&self, obs: &[f32], deterministic: bool, rng: &mut impl Rng) -> Result<Vec<f32>, SacError> {
        if obs.len() != self.obs_dim {
            return Err(SacError::DimensionMismatch { expected: self.obs_dim, got: obs.len() });
        }
        let out = self.actor.predict(obs, 1);
        let a = self.act_dim;
        let eps = if deterministic { vec![0.0; a] } else { gaussian(rng, a) };
        let mut actions = squash(&out, &eps, 1, a).actions;
        // tanh saturates to exactly +-1 in f32; keep the bound closed
        actions.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(actions)
    }

    /// One gradient step on critics, actor and temperature, then the target update.
    pub fn update(&mut self, batch: &Batch, cfg: &SacConfig, rng: &mut impl Rng) -> Result<LossReport, SacError> {
        let (b, a) = (batch.size, self.act_dim);
        let alpha = self.alpha() as f32;
        let gamma = cfg.discount as f32;

        // soft Bellman targets from the target critics
        let next_out = self.actor.predict(&batch.next_obs, b);
        let next = squash(&next_out, &gaussian(rng, b * a), b, a);
        let xn = join_rows(&batch.next_obs, &next.actions, b);
        let q1n = self.q1_target.predict(&xn, b);
        let q2n = self.q2_target.predict(&xn, b);
        let target: Vec<f32> = (0..b)
            .map(|i| {
                let soft = q1n[i].min(q2n[i]) - alpha * next.log_prob[i];
                batch.rew[i] + gamma * (1.0 - batch.done[i]) * soft
            })
            .collect();

        let x = join_rows(&batch.obs, &batch.act, b);
        let (l1, g1) = critic_objective(&self.q1, &x, &target, b);
        let (l2, g2) = critic_objective(&self.q2, &x, &target, b);
        self.q1_opt.step(&mut self.q1.params, &g1, cfg.critic_lr);
        self.q2_opt.step(&mut self.q2.params, &g2, cfg.critic_lr);

        let eps = gaussian(rng, b * a);
        let act = actor_objective(&self.actor, &self.q1, &self.q2, &batch.obs, &eps, alpha, b, a);
        self.actor_opt.step(&mut self.actor.params, &act.grad, cfg.actor_lr);

        let h_target = cfg.target_entropy_for(a) as f32;
        let (alpha_loss, g_alpha) = temperature_objective(self.log_alpha, &act.log_prob, h_target);
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[g_alpha], cfg.alpha_lr);
        self.log_alpha = la[0];

        let tau = cfg.tau as f32;
        self.q1_target.soft_update_from(&self.q1, tau);
        self.q2_target.soft_update_from(&self.q2, tau);
        self.step += 1;

        let entropy = -act.log_prob.iter().map(|&v| v as f64).sum::<f64>() / b as f64;
        let report = LossReport {
            critic_loss: (l1 + l2) as f64,
            actor_loss: act.loss as f64,
            alpha_loss: alpha_loss as f64,
            alpha: self.alpha(),
            entropy,
            mean_q: q1n.iter().map(|&v| v as f64).sum::<f64>() / b as f64,
        };
        let finite = [report.critic_loss, report.actor_loss, report.alpha_loss, report.alpha].iter().all(|v| v.is_finite());
        if !finite || !self.is_finite() {
            return Err(SacError::NumericalDivergence(format!("update {}: {report:?}", self.step)));
        }
        Ok(report)
    }
}

/// Finite-difference checks of the three losses on small random `f64`
/// networks: `[actor, critic, temperature]`.
pub fn grad_check_suite(seed: u64, eps: f64, tolerance: f64) -> [GradCheckReport; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs_dim, act_dim, batch) = (3, 2, 5);
    let hidden = [4, 4];
    let actor: Mlp<f64> = Mlp::new(&sizes(obs_dim, &hidden, 2 * act_dim), &mut rng);
    let q1: Mlp<f64> = Mlp::new(&sizes(obs_dim + act_dim, &hidden, 1), &mut rng);
    let q2: Mlp<f64> = Mlp::new(&sizes(obs_dim + act_dim, &hidden, 1), &mut rng);
    let obs: Vec<f64> = (0..batch * obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps_noise: Vec<f64> = (0..batch * act_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let act: Vec<f64> = (0..batch * act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..batch).map(|_| rng.random_range(-2.0..2.0)).collect();
    let alpha = rng.random_range(0.05..1.0);

    let obj = actor_objective(&actor, &q1, &q2, &obs, &eps_noise, alpha, batch, act_dim);
    let actor_sizes = actor.sizes().to_vec();
    let actor_report = grad_check(
        &actor.params,
        &obj.grad,
        |p| {
            let net = Mlp::from_params(&actor_sizes, p.to_vec()).unwrap();
            actor_objective(&net, &q1, &q2, &obs, &eps_noise, alpha, batch, act_dim).loss
        },
        eps,
        tolerance,
    );

    let x = join_rows(&obs, &act, batch);
    let (_, g) = critic_objective(&q1, &x, &target, batch);
    let q_sizes = q1.sizes().to_vec();
    let critic_report = grad_check(
        &q1.params,
        &g,
        |p| critic_objective(&Mlp::from_params(&q_sizes, p.to_vec()).unwrap(), &x, &target, batch).0,
        eps,
        tolerance,
    );

    let log_alpha = alpha.ln();
    let h = -(act_dim as f64);
    let (_, ga) = temperature_objective(log_alpha, &obj.log_prob, h);
    let temp_report = grad_check(&[log_alpha], &[ga], |p| temperature_objective(p[0], &obj.log_prob, h).0, eps, tolerance);
    [actor_report, critic_report, temp_report]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled_buffer(obs_dim: usize, act_dim: usize, n: usize, seed: u64) -> ReplayBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(n, obs_dim, act_dim);
        for _ in 0..n {
            let o: Vec<f32> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f32> = (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let o2: Vec<f32> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            buf.push(&o, &a, rng.random_range(-1.0..1.0), &o2, rng.random_bool(0.1));
        }
        buf
    }

    #[test]
    fn squash_log_prob_matches_naive_formula() {
        let out = [0.3f64, -0.2, 0.1, -1.0];
        let eps = [0.5f64, -1.5];
        let s = squash(&out, &eps, 1, 2);
        let mut naive = 0.0;
        for i in 0..2 {
            let (ls, _) = log_std_of(out[2 + i]);
            let u = out[i] + ls.exp() * eps[i];
            let gauss = -0.5 * eps[i] * eps[i] - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
            naive += gauss - (1.0 - u.tanh().powi(2)).ln();
        }
        assert!((s.log_prob[0] - naive).abs() < 1e-12);
        assert!(log_std_of(1e6f64).0 <= LOG_STD_MAX && log_std_of(-1e6f64).0 >= LOG_STD_MIN);
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for seed in 0..5 {
            for r in grad_check_suite(seed, 1e-5, 1e-4) {
                assert!(r.passed, "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn tiny_critic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Mlp<f64> = Mlp::new(&[3, 4, 1], &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = [0.5, -0.1, 0.3, 1.0];
        let (_, g) = critic_objective(&q, &x, &y, 4);
        let r = grad_check(&q.params, &g, |p| critic_objective(&Mlp::from_params(&[3, 4, 1], p.to_vec()).unwrap(), &x, &y, 4).0, 1e-5, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn act_contract() {
        let cfg = SacConfig::default();
        let mut p = PolicyState::new(5, 3, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let obs: Vec<f32> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            assert!(p.act(&obs, false, &mut rng).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let obs = [0.1f32, 0.2, 0.3, 0.4, 0.5];
        let a = p.act(&obs, false, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, p.act(&obs, false, &mut ChaCha8Rng::seed_from_u64(7)).unwrap());
        assert!(matches!(p.act(&[0.0; 4], true, &mut rng), Err(SacError::DimensionMismatch { .. })));
        p.actor.scale_output_layer(0.0);
        assert_eq!(p.act(&obs, true, &mut rng).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let cfg = SacConfig { actor_lr: 0.0, critic_lr: 0.0, alpha_lr: 0.0, tau: 1.0, batch_size: 16, ..Default::default() };
        let mut p = PolicyState::new(4, 2, &cfg, 3);
        let before = p.clone();
        let buf = filled_buffer(4, 2, 64, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.update(&buf.sample(16, &mut rng), &cfg, &mut rng).unwrap();
        assert_eq!(p.actor, before.actor);
        assert_eq!(p.q1, before.q1);
        assert_eq!(p.q2, before.q2);
        assert_eq!(p.log_alpha, before.log_alpha);
    }

    #[test]
    fn unit_tau_copies_critics() {
        let cfg = SacConfig { tau: 1.0, batch_size: 16, ..Default::default() };
        let mut p = PolicyState::new(4, 2, &cfg, 4);
        let buf = filled_buffer(4, 2, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.update(&buf.sample(16, &mut rng), &cfg, &mut rng).unwrap();
        assert_ne!(p.q1, PolicyState::new(4, 2, &cfg, 4).q1);
        assert_eq!(p.q1_target, p.q1);
        assert_eq!(p.q2_target, p.q2);
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(3, 1, 1);
        for i in 0..5 {
            buf.push(&[i as f32], &[0.0], i as f32, &[0.0], false);
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f32> = (0..3).map(|i| buf.reward(i)).collect();
        rewards.sort_by(f32::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_uniform() {
        let cells = 1000;
        let buf = filled_buffer(2, 1, cells, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; cells];
        for _ in 0..100 {
            for i in buf.sample(1000, &mut rng).indices {
                counts[i] += 1;
            }
        }
        let expected = 100_000.0 / cells as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Wilson-Hilferty upper 1% point of chi-square with cells - 1 dof
        let df = (cells - 1) as f64;
        let z = 2.326_347_874;
        let critical = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    #[test]
    fn entropy_tracks_target_on_bandit() {
        // one-step bandit: reward peaks at a = 0.3, episodes end immediately
        let cfg = SacConfig { batch_size: 64, hidden: vec![16, 16], alpha_lr: 3e-3, actor_lr: 1e-3, critic_lr: 1e-3, ..Default::default() };
        let mut p = PolicyState::new(1, 1, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(5000, 1, 1);
        let mut entropy = Vec::new();
        for step in 0..6000 {
            let a = p.act(&[1.0], false, &mut rng).unwrap();
            let r = -4.0 * (a[0] - 0.3).powi(2);
            buf.push(&[1.0], &a, r, &[1.0], true);
            if buf.len() >= 64 {
                let rep = p.update(&buf.sample(64, &mut rng), &cfg, &mut rng).unwrap();
                if step >= 5000 {
                    entropy.push(rep.entropy);
                }
            }
        }
        let mean = entropy.iter().sum::<f64>() / entropy.len() as f64;
        assert!((mean + 1.0).abs() <= 0.2, "entropy {mean}");
    }
}
