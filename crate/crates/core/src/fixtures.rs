//! Synthetic corpora of harmonic tones, for smoke tests, experiments and
//! benchmarks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{IdFormat, UtteranceId, UtteranceRecord};
use crate::dsp::{save_wav, DspError, Waveform};

const WORDS: [&str; 12] = ["red", "sun", "low", "tide", "map", "cold", "fir", "bay", "old", "ink", "hum", "west"];

/// Four harmonics with `1/k` amplitudes, 10 ms raised-cosine fades, peak
/// near 0.5.
pub fn harmonic_tone(f0: f64, seconds: f64, sample_rate: u32) -> Waveform {
    let rate = sample_rate as f64;
    let n = (seconds * rate).round() as usize;
    let fade = ((0.01 * rate) as usize).min(n / 2).max(1);
    let norm: f64 = (1..=4).map(|k| 1.0 / k as f64).sum();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let s: f64 = (1..=4).map(|k| (2.0 * PI * f0 * k as f64 * t).sin() / k as f64).sum();
            let edge = i.min(n - 1 - i);
            let env = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
            (0.5 * env * s / norm) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

#[derive(Clone, Copy, Debug)]
pub struct ToyCorpusSpec {
    pub chapters: u32,
    pub chunks_per_chapter: u32,
    pub sample_rate: u32,
    pub seed: u64,
    /// Range of tone durations in seconds.
    pub seconds: (f64, f64),
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec { chapters: 2, chunks_per_chapter: 6, sample_rate: 22050, seed: 0, seconds: (0.25, 0.4) }
    }
}

/// Short two- or three-word transcripts and tones of random pitch and
/// length.
pub fn toy_corpus(spec: &ToyCorpusSpec) -> Vec<(UtteranceRecord, Waveform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fmt = IdFormat::default();
    let mut out = Vec::new();
    for chapter in 1..=spec.chapters {
        for chunk in 1..=spec.chunks_per_chapter {
            let n_words = rng.gen_range(2..=3);
            let words: Vec<&str> = WORDS.choose_multiple(&mut rng, n_words).copied().collect();
            let text = format!("{}.", words.join(" "));
            let id = UtteranceId::new(chapter, chunk, &fmt);
            let rec = UtteranceRecord { audio_path: Path::new("wavs").join(format!("{}.wav", id.raw)), id, raw_text: text.to_uppercase(), text };
            let wave = harmonic_tone(rng.gen_range(100.0..220.0), rng.gen_range(spec.seconds.0..spec.seconds.1), spec.sample_rate);
            out.push((rec, wave));
        }
    }
    out
}

/// Writes `metadata.csv` and `wavs/*.wav` under `root`.
pub fn write_corpus(root: &Path, corpus: &[(UtteranceRecord, Waveform)]) -> Result<(), DspError> {
    let io = |path: &Path, source| DspError::Io { path: path.display().to_string(), source };
    let wavs = root.join("wavs");
    fs::create_dir_all(&wavs).map_err(|e| io(&wavs, e))?;
    let records: Vec<UtteranceRecord> = corpus.iter().map(|(r, _)| r.clone()).collect();
    let meta = root.join("metadata.csv");
    fs::write(&meta, crate::corpus::render_metadata(&records)).map_err(|e| io(&meta, e))?;
    for (rec, wave) in corpus {
        save_wav(rec.audio_under(root), wave)?;
    }
    Ok(())
}
