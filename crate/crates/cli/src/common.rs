use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctts_core::config::Config;
use ctts_core::dsp::{load_wav, mel_spectrogram, MelSpectrogram};
use ctts_core::train::{read_container, tensor_text, text_tensor, write_container};
use ctts_core::autodiff::Tensor;

pub const FEATURES: &str = "features.ctts";
pub const MANIFEST: &str = "manifest.txt";

/// Mel settings that must agree between the feature cache and training.
pub const MEL_KEYS: [&str; 7] = ["dsp.sample_rate", "dsp.n_fft", "dsp.hop", "dsp.n_mels", "dsp.fmin", "dsp.fmax", "dsp.log_floor"];

/// Keys that may change after training: they affect rendering, not the
/// network.
pub const RUNTIME_KEYS: [&str; 7] = ["dsp.griffin_lim_iters", "dsp.f0_frame_ms", "dsp.f0_hop_ms", "dsp.f0_min", "dsp.f0_max", "dsp.voicing_threshold", "model.max_frames"];

/// A command line that parsed but is not acceptable.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `base` updated by the config file, then by `--set` pairs. With
/// `allowed`, any other key is rejected.
pub fn build_config(mut base: Config, file: Option<&Path>, sets: &[String], allowed: Option<&[&str]>) -> Result<Config> {
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        pairs.extend(Config::pairs(&text).with_context(|| format!("config {}", path.display()))?);
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in &pairs {
        if let Some(keys) = allowed {
            if !keys.contains(&k.as_str()) {
                bail!("key {k} is fixed by the checkpoint; only {} may change", keys.join(", "));
            }
        }
        base.set(k, v)?;
    }
    base.validate()?;
    Ok(base)
}

pub fn mel_settings(cfg: &Config) -> String {
    cfg.entries().into_iter().filter(|(k, _)| MEL_KEYS.contains(k)).map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn wav_mel(path: &Path, cfg: &Config) -> Result<MelSpectrogram> {
    let wave = load_wav(path)?;
    if wave.sample_rate != cfg.mel.sample_rate {
        bail!("{} is {} Hz but dsp.sample_rate is {}", path.display(), wave.sample_rate, cfg.mel.sample_rate);
    }
    Ok(mel_spectrogram(&wave, &cfg.mel).with_context(|| format!("features of {}", path.display()))?)
}

pub fn mel_record(m: &MelSpectrogram) -> Tensor<f32> {
    Tensor::new(vec![m.n_frames, m.n_mels], m.data.clone()).expect("mel data matches its shape")
}

pub fn write_features(path: &Path, cfg: &Config, mels: &[(String, MelSpectrogram)]) -> Result<()> {
    let mut records = vec![("meta.mel".to_string(), text_tensor(&mel_settings(cfg)))];
    records.extend(mels.iter().map(|(id, m)| (format!("mel.{id}"), mel_record(m))));
    Ok(write_container(path, &records)?)
}

/// The feature cache, checked against the mel settings of `cfg`.
pub fn read_features(path: &Path, cfg: &Config) -> Result<HashMap<String, MelSpectrogram>> {
    let mut mels = HashMap::new();
    let mut settings = None;
    for (name, t) in read_container(path).with_context(|| format!("reading {}", path.display()))? {
        if name == "meta.mel" {
            settings = Some(tensor_text(&t)?);
        } else if let Some(id) = name.strip_prefix("mel.") {
            if t.rank() != 2 || t.shape()[1] != cfg.mel.n_mels {
                bail!("feature {id} has shape {:?}, expected [T, {}]", t.shape(), cfg.mel.n_mels);
            }
            mels.insert(id.to_string(), MelSpectrogram::new(t.data().to_vec(), t.shape()[0], t.shape()[1], cfg.mel.hop, cfg.mel.sample_rate));
        }
    }
    match settings {
        Some(s) if s == mel_settings(cfg) => Ok(mels),
        Some(s) => bail!("feature cache was built with different mel settings:\n{s}"),
        None => bail!("{} has no mel settings record", path.display()),
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn emit_json(out: &mut dyn std::io::Write, dir: Option<&Path>, name: &str, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    out.write_all(text.as_bytes())?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_file(dir.join(name), &text)?;
    }
    Ok(())
}
