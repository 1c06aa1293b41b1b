//! Flat `key=value` configuration covering `dsp.*`, `model.*` and `train.*`.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors; missing keys keep their defaults.

use std::str::FromStr;

use thiserror::Error;

use crate::dsp::{MelConfig, PitchConfig};
use crate::model::{ContextPoint, ModelConfig, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub griffin_lim_iters: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config { mel: MelConfig::default(), pitch: PitchConfig::default(), griffin_lim_iters: 60, model: ModelConfig::default(), train: TrainConfig::default() }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { key: key.to_string(), value: value.to_string() })
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply(source)?;
        Ok(cfg)
    }

    /// The `key=value` pairs of a config text, in order. Blank lines and
    /// `#` comments are skipped; a repeated key is an error.
    pub fn pairs(source: &str) -> Result<Vec<(String, String)>, ConfigError> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, detail: format!("expected key=value, got {line:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            out.push((key.to_string(), value.to_string()));
        }
        Ok(out)
    }

    /// Sets every key of a config text on top of `self`, then validates.
    pub fn apply(&mut self, source: &str) -> Result<(), ConfigError> {
        for (k, v) in Config::pairs(source)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Assigns one key. The model's mel width follows `dsp.n_mels`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "dsp.sample_rate" => self.mel.sample_rate = num(key, v)?,
            "dsp.n_fft" => self.mel.n_fft = num(key, v)?,
            "dsp.hop" => self.mel.hop = num(key, v)?,
            "dsp.n_mels" => self.mel.n_mels = num(key, v)?,
            "dsp.fmin" => self.mel.fmin = num(key, v)?,
            "dsp.fmax" => self.mel.fmax = num(key, v)?,
            "dsp.log_floor" => self.mel.log_floor = num(key, v)?,
            "dsp.griffin_lim_iters" => self.griffin_lim_iters = num(key, v)?,
            "dsp.f0_frame_ms" => self.pitch.frame_ms = num(key, v)?,
            "dsp.f0_hop_ms" => self.pitch.hop_ms = num(key, v)?,
            "dsp.f0_min" => self.pitch.f_min = num(key, v)?,
            "dsp.f0_max" => self.pitch.f_max = num(key, v)?,
            "dsp.voicing_threshold" => self.pitch.voicing_threshold = num(key, v)?,
            "model.char_emb" => self.model.char_emb = num(key, v)?,
            "model.enc_hidden" => self.model.enc_hidden = num(key, v)?,
            "model.prenet" => self.model.prenet = list(key, v)?,
            "model.prenet_dropout" => self.model.prenet_dropout = num(key, v)?,
            "model.dec_hidden" => self.model.dec_hidden = num(key, v)?,
            "model.attn_dim" => self.model.attn_dim = num(key, v)?,
            "model.ref_channels" => self.model.gst.conv_channels = list(key, v)?,
            "model.ref_hidden" => self.model.gst.ref_hidden = num(key, v)?,
            "model.tokens" => self.model.gst.tokens = num(key, v)?,
            "model.heads" => self.model.gst.heads = num(key, v)?,
            "model.head_dropout" => self.model.head_dropout = num(key, v)?,
            "model.max_frames" => self.model.max_frames = num(key, v)?,
            "model.mel_mean" => self.model.mel_norm.mean = num(key, v)?,
            "model.mel_std" => self.model.mel_norm.std = num(key, v)?,
            "model.context_point" => {
                self.model.context_point = match v {
                    "decoder" => ContextPoint::DecoderInput,
                    "encoder" => ContextPoint::EncoderOutputs,
                    _ => return Err(ConfigError::Value { key: key.into(), value: v.into() }),
                }
            }
            "train.variant" => self.train.variant = v.parse::<Variant>().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() })?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.beta1" => self.train.beta1 = num(key, v)?,
            "train.beta2" => self.train.beta2 = num(key, v)?,
            "train.adam_eps" => self.train.adam_eps = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.max_iters" => self.train.max_iters = num(key, v)?,
            "train.task_weight" => self.train.task_weight = num(key, v)?,
            "train.swap_prob" => self.train.swap_prob = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.grad_clip" => self.train.grad_clip = num(key, v)?,
            "train.log_every" => self.train.log_every = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.model.n_mels = self.mel.n_mels;
        self.model.gst.n_mels = self.mel.n_mels;
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, p, md, t) = (&self.mel, &self.pitch, &self.model, &self.train);
        vec![
            ("dsp.sample_rate", m.sample_rate.to_string()),
            ("dsp.n_fft", m.n_fft.to_string()),
            ("dsp.hop", m.hop.to_string()),
            ("dsp.n_mels", m.n_mels.to_string()),
            ("dsp.fmin", m.fmin.to_string()),
            ("dsp.fmax", m.fmax.to_string()),
            ("dsp.log_floor", m.log_floor.to_string()),
            ("dsp.griffin_lim_iters", self.griffin_lim_iters.to_string()),
            ("dsp.f0_frame_ms", p.frame_ms.to_string()),
            ("dsp.f0_hop_ms", p.hop_ms.to_string()),
            ("dsp.f0_min", p.f_min.to_string()),
            ("dsp.f0_max", p.f_max.to_string()),
            ("dsp.voicing_threshold", p.voicing_threshold.to_string()),
            ("model.char_emb", md.char_emb.to_string()),
            ("model.enc_hidden", md.enc_hidden.to_string()),
            ("model.prenet", join(&md.prenet)),
            ("model.prenet_dropout", md.prenet_dropout.to_string()),
            ("model.dec_hidden", md.dec_hidden.to_string()),
            ("model.attn_dim", md.attn_dim.to_string()),
            ("model.ref_channels", join(&md.gst.conv_channels)),
            ("model.ref_hidden", md.gst.ref_hidden.to_string()),
            ("model.tokens", md.gst.tokens.to_string()),
            ("model.heads", md.gst.heads.to_string()),
            ("model.head_dropout", md.head_dropout.to_string()),
            ("model.max_frames", md.max_frames.to_string()),
            ("model.mel_mean", md.mel_norm.mean.to_string()),
            ("model.mel_std", md.mel_norm.std.to_string()),
            (
                "model.context_point",
                match md.context_point {
                    ContextPoint::DecoderInput => "decoder",
                    ContextPoint::EncoderOutputs => "encoder",
                }
                .to_string(),
            ),
            ("train.variant", t.variant.name().to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_iters", t.max_iters.to_string()),
            ("train.task_weight", t.task_weight.to_string()),
            ("train.swap_prob", t.swap_prob.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mel.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.griffin_lim_iters < 1 {
            return Err(ConfigError::Invalid("dsp.griffin_lim_iters must be at least 1".into()));
        }
        if self.pitch.f_min <= 0.0 || self.pitch.f_min >= self.pitch.f_max {
            return Err(ConfigError::Invalid("need 0 < dsp.f0_min < dsp.f0_max".into()));
        }
        Ok(())
    }
}
