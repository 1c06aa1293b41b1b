use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::Stft;
use super::{DspError, MelConfig, MelFilterbank, MelSpectrogram, Waveform};

const PHASE_SEED: u64 = 0x6c1f;

/// Linear magnitudes from log-mel frames via the filterbank pseudo-inverse,
/// clamped at zero. Energy at or below the log floor is treated as silence.
fn mel_to_linear(m: &MelSpectrogram, cfg: &MelConfig) -> Result<Vec<Vec<f64>>, DspError> {
    let fb = MelFilterbank::new(cfg)?;
    let fbm = DMatrix::from_row_slice(fb.n_mels, fb.n_bins, &fb.weights);
    let pinv = fbm
        .pseudo_inverse(1e-10)
        .map_err(|e| DspError::Config(format!("filterbank pseudo-inverse: {e}")))?;
    Ok((0..m.n_frames)
        .map(|t| {
            let mel = nalgebra::DVector::from_iterator(m.n_mels, m.frame(t).iter().map(|&v| ((v as f64).exp() - cfg.log_floor).max(0.0)));
            (&pinv * mel).iter().map(|&v| v.max(0.0)).collect()
        })
        .collect())
}

/// Griffin-Lim phase reconstruction of a log-mel spectrogram.
pub fn griffin_lim(m: &MelSpectrogram, cfg: &MelConfig, iters: usize) -> Result<Waveform, DspError> {
    griffin_lim_traced(m, cfg, iters).map(|(w, _)| w)
}

/// Like [`griffin_lim`], also returning the magnitude error
/// `‖ |STFT(x_i)| − S ‖_F` after every iteration `i`.
pub fn griffin_lim_traced(m: &MelSpectrogram, cfg: &MelConfig, iters: usize) -> Result<(Waveform, Vec<f64>), DspError> {
    if iters < 1 {
        return Err(DspError::Config("griffin_lim needs iters >= 1".into()));
    }
    if m.n_mels != cfg.n_mels || m.hop != cfg.hop || m.sample_rate != cfg.sample_rate {
        return Err(DspError::Config(format!(
            "mel ({} mels, hop {}, {} Hz) does not match config ({} mels, hop {}, {} Hz)",
            m.n_mels, m.hop, m.sample_rate, cfg.n_mels, cfg.hop, cfg.sample_rate
        )));
    }
    if m.n_frames == 0 {
        return Ok((Waveform::new(Vec::new(), cfg.sample_rate), vec![0.0; iters]));
    }
    let target = mel_to_linear(m, cfg)?;
    let stft = Stft::new(cfg.n_fft, cfg.hop);
    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spectra: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|frame| frame.iter().map(|&a| Complex::from_polar(a, rng.gen_range(-PI..PI))).collect())
        .collect();
    let mut errors = Vec::with_capacity(iters);
    let mut x = Vec::new();
    for _ in 0..iters {
        x = stft.synthesize(&spectra);
        let analyzed = stft.analyze(&x);
        let mut err = 0.0;
        for (t, frame) in analyzed.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                let a = target[t][k];
                let mag = c.norm();
                err += (mag - a) * (mag - a);
                spectra[t][k] = if mag > 1e-12 { c * (a / mag) } else { Complex::new(a, 0.0) };
            }
        }
        errors.push(err.sqrt());
    }
    let samples = x.iter().map(|&v| v as f32).collect();
    Ok((Waveform::new(samples, cfg.sample_rate), errors))
}
