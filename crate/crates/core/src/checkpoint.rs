//! Binary policy checkpoints and the replay-buffer sidecar used for resuming.
//!
//! Checkpoint layout, all little-endian:
//!
//! ```text
//! magic        8 bytes  "MIMICKPT"
//! version      u32      1
//! obs_dim      u32
//! act_dim      u32
//! 5 networks   actor, q1, q2, q1_target, q2_target, each:
//!                u32 layer count L, L x u32 sizes, then the flat parameters as f32
//! log_alpha    f32
//! 4 optimizers actor, q1, q2, temperature, each:
//!                u64 step count t, m as f32 (one per parameter), v as f32
//! step         u64      gradient updates performed
//! ```
//!
//! Optimizer hyperparameters are not stored; they come from the run config.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::{Adam, AdamConfig, Mlp};
use crate::sac::{PolicyState, ReplayBuffer};

pub const MAGIC: &[u8; 8] = b"MIMICKPT";
pub const VERSION: u32 = 1;
const REPLAY_MAGIC: &[u8; 8] = b"MIMICRPL";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn net(&mut self, net: &Mlp<f32>) {
        self.u32(net.sizes().len() as u32);
        for &s in net.sizes() {
            self.u32(s as u32);
        }
        self.f32s(&net.params);
    }
    fn adam(&mut self, opt: &Adam) {
        self.u64(opt.t);
        self.f32s(&opt.m);
        self.f32s(&opt.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn net(&mut self) -> Result<Mlp<f32>, CheckpointError> {
        let layers = self.u32()? as usize;
        if !(2..=64).contains(&layers) {
            return Err(CheckpointError::Format(format!("implausible layer count {layers}")));
        }
        let sizes = (0..layers).map(|_| self.u32().map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
            return Err(CheckpointError::Format(format!("implausible layer sizes {sizes:?}")));
        }
        let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let params = self.f32s(count)?;
        Ok(Mlp::from_params(&sizes, params).expect("count matches sizes"))
    }
    fn adam(&mut self, n: usize, config: AdamConfig) -> Result<Adam, CheckpointError> {
        let t = self.u64()?;
        let m = self.f32s(n)?;
        let v = self.f32s(n)?;
        Ok(Adam { config, m, v, t })
    }
}

pub fn encode_policy(p: &PolicyState) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(p.obs_dim as u32);
    w.u32(p.act_dim as u32);
    for net in [&p.actor, &p.q1, &p.q2, &p.q1_target, &p.q2_target] {
        w.net(net);
    }
    w.f32s(&[p.log_alpha]);
    for opt in [&p.actor_opt, &p.q1_opt, &p.q2_opt, &p.alpha_opt] {
        w.adam(opt);
    }
    w.u64(p.step);
    w.0
}

pub fn decode_policy(bytes: &[u8], adam: AdamConfig) -> Result<PolicyState, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    let actor = r.net()?;
    let q1 = r.net()?;
    let q2 = r.net()?;
    let q1_target = r.net()?;
    let q2_target = r.net()?;
    let shapes_ok = actor.input_dim() == obs_dim
        && actor.output_dim() == 2 * act_dim
        && [&q1, &q2, &q1_target, &q2_target].iter().all(|q| q.sizes() == q1.sizes())
        && q1.input_dim() == obs_dim + act_dim
        && q1.output_dim() == 1;
    if !shapes_ok {
        return Err(CheckpointError::Format("network shapes are inconsistent".into()));
    }
    let log_alpha = r.f32s(1)?[0];
    let actor_opt = r.adam(actor.num_params(), adam)?;
    let q1_opt = r.adam(q1.num_params(), adam)?;
    let q2_opt = r.adam(q2.num_params(), adam)?;
    let alpha_opt = r.adam(1, adam)?;
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(PolicyState {
        obs_dim,
        act_dim,
        actor,
        q1,
        q2,
        q1_target,
        q2_target,
        log_alpha,
        actor_opt,
        q1_opt,
        q2_opt,
        alpha_opt,
        step,
    })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save_policy(path: &Path, p: &PolicyState) -> Result<(), CheckpointError> {
    fs::write(path, encode_policy(p)).map_err(io(path))
}

pub fn load_policy(path: &Path, adam: AdamConfig) -> Result<PolicyState, CheckpointError> {
    decode_policy(&fs::read(path).map_err(io(path))?, adam)
}

/// Replay sidecar: magic, then u64 capacity, obs_dim, act_dim, head, len,
/// then obs, act, rew, next_obs, done as f32 arrays of the stored length.
pub fn encode_replay(buf: &ReplayBuffer) -> Vec<u8> {
    let parts = buf.raw_parts();
    let mut w = Writer::default();
    w.0.extend_from_slice(REPLAY_MAGIC);
    for v in [parts.capacity, parts.obs_dim, parts.act_dim, parts.head, parts.len] {
        w.u64(v as u64);
    }
    for arr in [parts.obs, parts.act, parts.rew, parts.next_obs, parts.done] {
        w.f32s(arr);
    }
    w.0
}

pub fn decode_replay(bytes: &[u8]) -> Result<ReplayBuffer, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != REPLAY_MAGIC {
        return Err(CheckpointError::Format("bad replay magic".into()));
    }
    let mut h = [0usize; 5];
    for v in h.iter_mut() {
        *v = r.u64()? as usize;
    }
    let [capacity, obs_dim, act_dim, head, len] = h;
    if capacity == 0 || len > capacity || head >= capacity {
        return Err(CheckpointError::Format("inconsistent replay header".into()));
    }
    let obs = r.f32s(len * obs_dim)?;
    let act = r.f32s(len * act_dim)?;
    let rew = r.f32s(len)?;
    let next_obs = r.f32s(len * obs_dim)?;
    let done = r.f32s(len)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes in replay file".into()));
    }
    Ok(ReplayBuffer::from_raw_parts(capacity, obs_dim, act_dim, head, len, obs, act, rew, next_obs, done))
}

pub fn save_replay(path: &Path, buf: &ReplayBuffer) -> Result<(), CheckpointError> {
    fs::write(path, encode_replay(buf)).map_err(io(path))
}

pub fn load_replay(path: &Path) -> Result<ReplayBuffer, CheckpointError> {
    decode_replay(&fs::read(path).map_err(io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::SacConfig;

    #[test]
    fn policy_round_trip() {
        let cfg = SacConfig { hidden: vec![8, 4], ..Default::default() };
        let mut p = PolicyState::new(5, 2, &cfg, 1);
        p.step = 42;
        p.actor_opt.t = 7;
        p.q2_opt.m[3] = 0.25;
        let bytes = encode_policy(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode_policy(&bytes, cfg.adam).unwrap(), p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = SacConfig { hidden: vec![4], ..Default::default() };
        let bytes = encode_policy(&PolicyState::new(3, 1, &cfg, 0));
        assert!(decode_policy(&bytes[..bytes.len() - 1], cfg.adam).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_policy(&bad, cfg.adam).is_err());
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(decode_policy(&ver, cfg.adam).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_policy(&extra, cfg.adam).is_err());
    }

    #[test]
    fn replay_round_trip() {
        let mut buf = ReplayBuffer::new(4, 2, 1);
        for i in 0..6 {
            let v = i as f32;
            buf.push(&[v, -v], &[0.5 * v], v, &[v + 1.0, 0.0], i % 2 == 0);
        }
        assert_eq!(decode_replay(&encode_replay(&buf)).unwrap(), buf);
    }
}
