use rayon::prelude::*;
use serde_json::json;

use crate::dsp::{estimate_f0, MelSpectrogram, PitchContour};
use crate::model::{synthesize, SynthesisRequest};
use crate::train::TrainState;

use super::EvalError;

/// Renditions of one text under different contexts.
#[derive(Clone, Debug)]
pub struct VariationReport {
    pub contours: Vec<PitchContour>,
    /// Mel frames per rendition.
    pub frame_counts: Vec<usize>,
    pub mels: Vec<MelSpectrogram>,
    /// Population std of `frame_counts`, in frames.
    pub duration_std: f64,
    /// Mean over normalized time of the across-rendition F0 std, in Hz.
    pub f0_framewise_std: f64,
}

impl VariationReport {
    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "renditions": self.frame_counts.len(),
            "frame_counts": self.frame_counts,
            "duration_std": self.duration_std,
            "f0_framewise_std": self.f0_framewise_std,
        })
    }
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Lower median.
fn median_len(lens: &[usize]) -> usize {
    let mut v = lens.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Linear resampling of an F0 track to `len` points. Points between a
/// voiced and an unvoiced frame take the nearer frame's value (the earlier
/// one at the midpoint).
pub(crate) fn resample_f0(track: &[Option<f64>], len: usize) -> Vec<Option<f64>> {
    if track.is_empty() || len == 0 {
        return vec![None; len];
    }
    let scale = if len > 1 { (track.len() - 1) as f64 / (len - 1) as f64 } else { 0.0 };
    (0..len)
        .map(|j| {
            let x = j as f64 * scale;
            let i = (x.floor() as usize).min(track.len() - 1);
            let frac = x - i as f64;
            match (track[i], track.get(i + 1).copied().flatten()) {
                (Some(a), Some(b)) => Some(a + frac * (b - a)),
                _ if frac <= 0.5 => track[i],
                _ => track.get(i + 1).copied().flatten(),
            }
        })
        .collect()
}

/// Mean over time of the std across tracks, counting only instants where
/// at least two tracks are voiced; 0 when there are none.
pub(crate) fn framewise_std(tracks: &[Vec<Option<f64>>]) -> f64 {
    let len = tracks.first().map_or(0, Vec::len);
    let stds: Vec<f64> = (0..len)
        .filter_map(|j| {
            let voiced: Vec<f64> = tracks.iter().filter_map(|t| t[j]).collect();
            (voiced.len() >= 2).then(|| population_std(&voiced))
        })
        .collect();
    if stds.is_empty() {
        0.0
    } else {
        stds.iter().sum::<f64>() / stds.len() as f64
    }
}

pub(crate) fn report(contours: Vec<PitchContour>, mels: Vec<MelSpectrogram>) -> VariationReport {
    let frame_counts: Vec<usize> = mels.iter().map(|m| m.n_frames).collect();
    let durations: Vec<f64> = frame_counts.iter().map(|&f| f as f64).collect();
    let target = median_len(&contours.iter().map(|c| c.points.len()).collect::<Vec<_>>());
    let tracks: Vec<Vec<Option<f64>>> = contours.iter().map(|c| resample_f0(&c.points.iter().map(|p| p.1).collect::<Vec<_>>(), target)).collect();
    VariationReport { duration_std: population_std(&durations), f0_framewise_std: framewise_std(&tracks), contours, frame_counts, mels }
}

/// Synthesizes `text` once per context with the same seed, reconstructs
/// each waveform and tracks its F0.
pub fn variation_analysis(state: &TrainState, text: &str, contexts: &[MelSpectrogram], seed: u64) -> Result<VariationReport, EvalError> {
    if !state.model.variant.uses_context() {
        return Err(EvalError::NoContextInput);
    }
    if contexts.len() < 2 {
        return Err(EvalError::Invalid(format!("variation analysis needs at least 2 contexts, got {}", contexts.len())));
    }
    let cfg = &state.config;
    let iters = cfg.griffin_lim_iters.max(1);
    let renditions: Vec<(PitchContour, MelSpectrogram)> = contexts
        .par_iter()
        .map(|ctx| {
            let req = SynthesisRequest { text, context: Some(ctx), seed, max_frames: cfg.model.max_frames, griffin_lim_iters: iters };
            let syn = synthesize(&state.model, &state.params, &cfg.mel, &req)?;
            let wave = syn.waveform.expect("griffin_lim_iters > 0 yields a waveform");
            Ok((estimate_f0(&wave, &cfg.pitch), syn.mel))
        })
        .collect::<Result<_, EvalError>>()?;
    let (contours, mels) = renditions.into_iter().unzip();
    Ok(report(contours, mels))
}
