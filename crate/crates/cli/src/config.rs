//! Run configuration: defaults, JSON file, dotted command-line overrides.
//!
//! Precedence is CLI > file > default. Every leaf of the serialized config can
//! be set on the command line as `--dotted.name value` or `--dotted.name=value`.

use std::path::{Path, PathBuf};

use mimic_core::encoder::EncoderParams;
use mimic_core::env::EnvConfig;
use mimic_core::physics::MorphologySpec;
use mimic_core::render::Camera;
use mimic_core::reward::RewardWeights;
use mimic_core::trainer::TrainerConfig;
use mimic_core::video::GaitScript;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in morphology name or path to a morphology JSON file.
    pub morphology: String,
    /// `gait:<name or path>` for a synthetic expert, `video:<dir>` for a stored video.
    pub reference: String,
    /// Frame rate of synthetic expert videos.
    pub fps: f64,
    /// Seed of the synthetic expert's reset perturbation.
    pub expert_seed: u64,
    /// Intensity threshold used to segment stored videos that ship without masks.
    pub segment_threshold: u8,
    pub camera: Camera,
    pub weights: RewardWeights,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub encoder: EncoderParams,
    /// Encoder bridge address; the built-in encoder is used when absent.
    pub bridge: Option<String>,
    pub bridge_timeout_secs: f64,
    pub output: PathBuf,
    pub seed: u64,
    /// Save a checkpoint after every this many evaluations.
    pub checkpoint_every: u64,
    /// Also write the replay buffer with each checkpoint, needed for exact resume.
    pub save_replay: bool,
    /// Episodes of the final evaluation and of the `eval` command.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            morphology: "walker2d".into(),
            reference: "gait:walker-gait-v1".into(),
            fps: 25.0,
            expert_seed: 0,
            segment_threshold: 0,
            camera: Camera::default(),
            weights: RewardWeights::default(),
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            encoder: EncoderParams::default(),
            bridge: None,
            bridge_timeout_secs: 10.0,
            output: PathBuf::from("runs/default"),
            seed: 0,
            checkpoint_every: 4,
            save_replay: true,
            eval_episodes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceSource {
    Gait(GaitScript),
    Video(PathBuf),
}

/// Ablation switches applied after all other configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_iou: bool,
    pub no_video: bool,
    pub no_reg: bool,
}

impl Ablation {
    pub fn apply(self, w: &mut RewardWeights) {
        if self.no_iou {
            w.beta = 0.0;
        }
        if self.no_video {
            w.alpha = 0.0;
        }
        if self.no_reg {
            w.gamma_reg = 0.0;
        }
    }
}

impl RunConfig {
    pub fn morphology_spec(&self) -> Result<MorphologySpec, CliError> {
        if let Some(m) = MorphologySpec::by_name(&self.morphology) {
            return Ok(m);
        }
        let path = Path::new(&self.morphology);
        if !path.is_file() {
            return Err(CliError::Config(format!("unknown morphology {:?}", self.morphology)));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        MorphologySpec::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn reference_source(&self) -> Result<ReferenceSource, CliError> {
        let (kind, arg) = self
            .reference
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("reference must be gait:<script> or video:<dir>, got {:?}", self.reference)))?;
        match kind {
            "gait" => {
                let script = match arg {
                    "walker-gait-v1" => GaitScript::walker_gait_v1(),
                    "hopper-gait-v1" => GaitScript::hopper_gait_v1(),
                    path => {
                        let p = Path::new(path);
                        if !p.is_file() {
                            return Err(CliError::Config(format!("gait script {path:?} not found")));
                        }
                        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                        GaitScript::from_json(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?
                    }
                };
                Ok(ReferenceSource::Gait(script))
            }
            "video" => {
                let dir = PathBuf::from(arg);
                if !dir.join("meta.json").is_file() {
                    return Err(CliError::Config(format!("video directory {arg:?} has no meta.json")));
                }
                Ok(ReferenceSource::Video(dir))
            }
            _ => Err(CliError::Config(format!("unknown reference kind {kind:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.morphology_spec()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.reference_source()?;
        if !self.camera.is_valid() {
            return Err(CliError::Config("camera must have positive size and resolution".into()));
        }
        if !self.weights.is_valid() {
            return Err(CliError::Config("reward weights must be finite and non-negative".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(CliError::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.encoder.d == 0 {
            return Err(CliError::Config("encoder.d must be positive".into()));
        }
        if !(self.bridge_timeout_secs > 0.0 && self.bridge_timeout_secs.is_finite()) {
            return Err(CliError::Config("bridge_timeout_secs must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.eval_episodes == 0 {
            return Err(CliError::Config("checkpoint_every and eval_episodes must be positive".into()));
        }
        self.trainer.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Trainer settings with the run seed filled in.
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig { seed: self.seed, ..self.trainer.clone() }
    }
}

/// One `--dotted.name value` setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |v, part| v.as_object()?.get(part))
}

/// Whether `key` names a field of the configuration.
pub fn is_config_key(key: &str) -> bool {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    lookup(&defaults, key).is_some()
}

/// Splits config overrides out of the raw arguments. Returns the overrides and
/// the remaining arguments, which go to the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<Override>, Vec<String>), CliError> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !is_config_key(&key) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Config(format!("--{key} needs a value")))?,
        };
        overrides.push(Override { key, value });
    }
    Ok((overrides, rest))
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Config(format!("unknown config key {child:?}")))?;
                merge(slot, v, &child)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set(root: &mut Value, ov: &Override) -> Result<(), CliError> {
    let mut slot = root;
    for part in ov.key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key {:?}", ov.key)))?;
    }
    *slot = if slot.is_string() {
        Value::String(ov.value.clone())
    } else {
        serde_json::from_str(&ov.value).unwrap_or_else(|_| Value::String(ov.value.clone()))
    };
    Ok(())
}

/// Builds the configuration from defaults, an optional JSON file, the bridge
/// environment variable and command-line overrides, in increasing precedence.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[Override],
    bridge_env: Option<String>,
    ablation: Ablation,
) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Config(format!("cannot read config {}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, patch, "")?;
    }
    if let Some(addr) = bridge_env.filter(|a| !a.trim().is_empty()) {
        value["bridge"] = Value::String(addr);
    }
    for ov in overrides {
        set(&mut value, ov)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    ablation.apply(&mut cfg.weights);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(key: &str, value: &str) -> Override {
        Override { key: key.into(), value: value.into() }
    }

    #[test]
    fn overrides_are_split_from_other_arguments() {
        let args = ["train", "--trainer.total_steps", "1000", "--no-iou", "--seed=4", "--resume", "--output", "7"]
            .map(String::from)
            .to_vec();
        let (ovs, rest) = extract_overrides(args).unwrap();
        assert_eq!(ovs, vec![ov("trainer.total_steps", "1000"), ov("seed", "4"), ov("output", "7")]);
        assert_eq!(rest, ["train", "--no-iou", "--resume"]);
        assert!(extract_overrides(vec!["--seed".into()]).is_err());
    }

    #[test]
    fn values_keep_their_types() {
        let cfg = resolve(
            None,
            &[ov("output", "123"), ov("trainer.sac.hidden", "[8,8]"), ov("bridge", "localhost:9"), ov("camera.height", "32")],
            None,
            Ablation::default(),
        )
        .unwrap();
        assert_eq!(cfg.output, PathBuf::from("123"));
        assert_eq!(cfg.trainer.sac.hidden, vec![8, 8]);
        assert_eq!(cfg.bridge.as_deref(), Some("localhost:9"));
        assert_eq!(cfg.camera.height, 32);
        let bad = resolve(None, &[ov("camera.height", "tall")], None, Ablation::default());
        assert!(matches!(bad, Err(CliError::Config(_))));
        let unknown = resolve(None, &[ov("camera.depth", "1")], None, Ablation::default());
        assert!(matches!(unknown, Err(CliError::Config(_))));
    }

    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"trainer": {"total_steps": 2000}, "bridge": "file:1"}"#).unwrap();
        for use_file in [false, true] {
            for use_env in [false, true] {
                for use_cli in [false, true] {
                    let cli = if use_cli { vec![ov("trainer.total_steps", "3000"), ov("bridge", "cli:1")] } else { vec![] };
                    let env = use_env.then(|| "env:1".to_string());
                    let cfg = resolve(use_file.then_some(file.as_path()), &cli, env, Ablation::default()).unwrap();
                    let steps = if use_cli { 3000 } else if use_file { 2000 } else { 500_000 };
                    assert_eq!(cfg.trainer.total_steps, steps, "file={use_file} cli={use_cli}");
                    let bridge = if use_cli {
                        Some("cli:1")
                    } else if use_env {
                        Some("env:1")
                    } else if use_file {
                        Some("file:1")
                    } else {
                        None
                    };
                    assert_eq!(cfg.bridge.as_deref(), bridge, "file={use_file} env={use_env} cli={use_cli}");
                    // untouched fields keep their defaults
                    assert_eq!(cfg.trainer.warmup_steps, 5000);
                }
            }
        }
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"trainer": {"total_stepz": 2000}}"#).unwrap();
        let err = resolve(Some(&file), &[], None, Ablation::default()).unwrap_err();
        assert!(err.to_string().contains("trainer.total_stepz"), "{err}");
    }

    #[test]
    fn ablation_flags_zero_one_weight_each() {
        let base = RewardWeights::default();
        for (flag, expect) in [
            (Ablation { no_iou: true, ..Default::default() }, RewardWeights { beta: 0.0, ..base.clone() }),
            (Ablation { no_video: true, ..Default::default() }, RewardWeights { alpha: 0.0, ..base.clone() }),
            (Ablation { no_reg: true, ..Default::default() }, RewardWeights { gamma_reg: 0.0, ..base.clone() }),
        ] {
            assert_eq!(resolve(None, &[], None, flag).unwrap().weights, expect);
        }
    }

    #[test]
    fn reference_sources() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.reference_source().unwrap(), ReferenceSource::Gait(_)));
        cfg.reference = "gait:/nonexistent.json".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.reference = "video:/nonexistent".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.reference = "walker".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }
}
