//! Flat `key = value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::{DecodeConfig, DecodeMode, DEFAULT_MAX_NEW_TOKENS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedules::{
    DropoutSchedule, EarlyExitLossSchedule, ExitCurriculum, LayerProfile, TimeCurriculum,
};
use crate::tokenizer::VOCAB_SIZE;
use crate::trainer::{AdamWConfig, LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitCurriculumKind {
    /// Last-layer loss only.
    None,
    Rotational,
    Gradual,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// Held-out text; when absent the tail of the corpus is used.
    pub heldout: Option<PathBuf>,
    pub heldout_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub prompts: Option<PathBuf>,
    pub prompt: Option<String>,

    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_context: usize,
    pub ffn_hidden: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub min_lr_ratio: f64,
    pub scale_lr_with_dropout: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,

    pub p_max: f64,
    pub time_curriculum: TimeCurriculum,
    pub layer_profile: LayerProfile,

    pub e_scale: f64,
    pub exit_curriculum: ExitCurriculumKind,
    pub rotation: usize,
    pub rotation_keeps_last: bool,

    pub mode: DecodeMode,
    pub exit_layer: usize,
    pub num_speculations: usize,
    pub max_new_tokens: usize,
    pub reuse_cache: bool,

    pub probe_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        RunConfig {
            corpus: None,
            heldout: None,
            heldout_fraction: 0.1,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
            prompts: None,
            prompt: None,
            n_layers: 8,
            dim: 128,
            n_heads: 4,
            vocab: VOCAB_SIZE,
            max_context: 1024,
            ffn_hidden: 352,
            steps: 1000,
            batch_size: 8,
            context_len: 128,
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup_fraction: 0.02,
            min_lr_ratio: 0.1,
            scale_lr_with_dropout: true,
            seed: 0,
            eval_every: 0,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
            grad_clip: opt.grad_clip,
            p_max: 0.1,
            time_curriculum: TimeCurriculum::Exponential,
            layer_profile: LayerProfile::Exponential,
            e_scale: 0.2,
            exit_curriculum: ExitCurriculumKind::Rotational,
            rotation: 8,
            rotation_keeps_last: false,
            mode: DecodeMode::SelfSpeculative,
            exit_layer: 4,
            num_speculations: 4,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            reuse_cache: true,
            probe_tokens: 16,
        }
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                i + 1
            )));
        };
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {k:?}",
                i + 1
            )));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Defaults overridden by `file` entries, then by `overrides` (flags
    /// win). Unknown keys and unparsable values are rejected.
    pub fn resolve(
        file: &BTreeMap<String, String>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("config serializes to an object");
        };
        for (k, v) in file.iter().chain(overrides) {
            let slot = map
                .get(k)
                .ok_or_else(|| Error::Config(format!("unknown key {k:?}")))?;
            let typed = typed_value(k, slot, v)?;
            map.insert(k.clone(), typed);
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model()?.validate()?;
        cfg.train()?.validate(&cfg.model()?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        RunConfig::resolve(&parse_kv(&text)?, overrides)
    }

    /// Every key with its resolved value, one per line, sorted. Unset
    /// optional keys are omitted. Parsing the output gives back `self`.
    pub fn to_kv(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object");
        };
        let mut out = String::new();
        for (k, v) in map {
            let s = match v {
                Value::Null => continue,
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {s}\n"));
        }
        out
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            n_layers: self.n_layers,
            dim: self.dim,
            n_heads: self.n_heads,
            vocab: self.vocab,
            max_context: self.max_context,
            ffn_hidden: self.ffn_hidden,
        };
        if m.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab must be {VOCAB_SIZE} for the byte tokenizer, got {}",
                m.vocab
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let (t, l) = (self.steps, self.n_layers);
        let mut dropout = DropoutSchedule::new(self.p_max, self.time_curriculum, t, l, self.seed)?;
        dropout.layer_profile = self.layer_profile;
        let curriculum = match self.exit_curriculum {
            ExitCurriculumKind::None => None,
            ExitCurriculumKind::Rotational => Some(ExitCurriculum::Rotational {
                dilation: self.rotation,
            }),
            ExitCurriculumKind::Gradual => Some(ExitCurriculum::Gradual),
            ExitCurriculumKind::All => Some(ExitCurriculum::All),
        };
        let early_exit = match curriculum {
            None => EarlyExitLossSchedule::disabled(t, l),
            Some(c) => {
                let mut s = EarlyExitLossSchedule::new(self.e_scale, c, t, l)?;
                s.rotation_keeps_last = self.rotation_keeps_last;
                s
            }
        };
        Ok(TrainConfig {
            steps: t,
            batch_size: self.batch_size,
            context_len: self.context_len,
            learning_rate: self.learning_rate,
            lr_schedule: self.lr_schedule,
            warmup_fraction: self.warmup_fraction,
            min_lr_ratio: self.min_lr_ratio,
            scale_lr_with_dropout: self.scale_lr_with_dropout,
            seed: self.seed,
            dropout,
            early_exit,
            eval_every: self.eval_every,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
            },
        })
    }

    /// Decode settings; validated against `model`, which may come from a
    /// checkpoint rather than this config.
    pub fn decode(&self, model: &ModelConfig) -> Result<DecodeConfig> {
        let d = DecodeConfig {
            exit_layer: self.exit_layer,
            num_speculations: self.num_speculations,
            max_new_tokens: self.max_new_tokens,
            mode: self.mode,
            reuse_cache: self.reuse_cache,
        };
        d.validate(model)?;
        Ok(d)
    }

    /// Checks that a required input path is set and exists.
    pub fn require_file<'a>(&self, key: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is required")))?;
        if !p.is_file() {
            return Err(Error::Config(format!(
                "{key}: {} is not a readable file",
                p.display()
            )));
        }
        Ok(p)
    }
}

fn typed_value(key: &str, slot: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => Value::Number(
            raw.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?
                .into(),
        ),
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        Value::Array(_) | Value::Object(_) => unreachable!("config is flat"),
    })
}
