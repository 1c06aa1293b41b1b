use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{DspError, Waveform};

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { sample_rate: 22050, n_fft: 1024, hop: 256, n_mels: 80, fmin: 0.0, fmax: 8000.0, log_floor: 1e-5 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop == 0 || self.n_fft < self.hop {
            return bad("need 0 < hop <= n_fft");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for `len` samples without edge padding.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }
}

/// Log-mel frames, `n_frames x n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize, n_mels: usize, hop: usize, sample_rate: u32) -> Self {
        assert_eq!(data.len(), n_frames * n_mels);
        MelSpectrogram { data, n_frames, n_mels, hop, sample_rate }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale, area-normalized.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels x n_bins`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Peak frequency of each filter, Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w * norm;
            }
        }
        let centers = edges[1..=cfg.n_mels].to_vec();
        Ok(MelFilterbank { weights, n_mels: cfg.n_mels, n_bins, centers })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(magnitude).map(|(w, x)| w * x).sum())
            .collect()
    }
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub(crate) struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Stft { n_fft, hop, window: hann(n_fft), forward: planner.plan_fft_forward(n_fft), inverse: planner.plan_fft_inverse(n_fft) }
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Complex spectra (non-negative bins only) of each windowed frame.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..self.frames(x.len()))
            .map(|t| {
                let start = t * self.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(x[start + i] * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..bins].to_vec()
            })
            .collect()
    }

    /// Least-squares overlap-add inverse of [`Stft::analyze`].
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        if spectra.is_empty() {
            return Vec::new();
        }
        let len = (spectra.len() - 1) * self.hop + self.n_fft;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for (t, spec) in spectra.iter().enumerate() {
            let bins = spec.len();
            buf[..bins].copy_from_slice(spec);
            for k in bins..self.n_fft {
                buf[k] = spec[self.n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                out[start + i] += buf[i].re * scale * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            } else {
                *o = 0.0;
            }
        }
        out
    }
}

/// Magnitude STFT frames of `x` (Hann window, no edge padding).
pub fn stft_magnitude(x: &[f32], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    let stft = Stft::new(n_fft, hop);
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    stft.analyze(&xs).into_iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect()
}

/// Log-mel spectrogram: `log(max(filterbank · |STFT|, log_floor))` per frame.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, DspError> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(DspError::RateMismatch(w.sample_rate, cfg.sample_rate));
    }
    if w.samples.len() < cfg.n_fft {
        return Err(DspError::TooShort { len: w.samples.len(), n_fft: cfg.n_fft });
    }
    let fb = MelFilterbank::new(cfg)?;
    let mags = stft_magnitude(&w.samples, cfg.n_fft, cfg.hop);
    let n_frames = mags.len();
    let mut data = Vec::with_capacity(n_frames * cfg.n_mels);
    for mag in &mags {
        data.extend(fb.apply(mag).into_iter().map(|v| v.max(cfg.log_floor).ln() as f32));
    }
    Ok(MelSpectrogram::new(data, n_frames, cfg.n_mels, cfg.hop, cfg.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        Waveform::new((0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32).collect(), rate)
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 22050], 22050);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m.n_frames, (22050 - 1024) / 256 + 1);
        assert_eq!(m.n_frames, 83);
    }

    #[test]
    fn silence_is_log_floor_everywhere() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&Waveform::new(vec![0.0; 4096], 22050), &cfg).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(m.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_input_is_an_error() {
        let cfg = MelConfig::default();
        assert!(matches!(
            mel_spectrogram(&Waveform::new(vec![0.0; 1000], 22050), &cfg),
            Err(DspError::TooShort { len: 1000, n_fft: 1024 })
        ));
    }

    #[test]
    fn sine_peaks_in_bracketing_bin() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg).unwrap();
        // bracketing bin from the mel formula alone
        let step = (hz_to_mel(cfg.fmax) - hz_to_mel(cfg.fmin)) / (cfg.n_mels + 1) as f64;
        let pos = (hz_to_mel(440.0) - hz_to_mel(cfg.fmin)) / step - 1.0;
        let below = pos.floor() as usize;
        assert!(fb.centers[below] <= 440.0 && fb.centers[below + 1] > 440.0);
        let m = mel_spectrogram(&sine(440.0, 1.0, 22050), &cfg).unwrap();
        for t in 0..m.n_frames {
            let f = m.frame(t);
            let arg = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert!(arg == below || arg == below + 1, "frame {t}: argmax {arg}, bracket {below}");
        }
    }

    #[test]
    fn filterbank_rows_are_nonnegative_with_increasing_peaks() {
        let fb = MelFilterbank::new(&MelConfig::default()).unwrap();
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "row {m} is empty");
        }
        assert!(fb.centers.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stft_round_trip_reconstructs_interior() {
        let stft = Stft::new(256, 64);
        let x: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.31).cos()).collect();
        let y = stft.synthesize(&stft.analyze(&x));
        for i in 64..y.len() - 64 {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }
}
