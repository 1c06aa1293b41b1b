//! Audio I/O and signal features.
//!
//! Mel spectrograms are the model's input and target, F0 contours drive the
//! context-variation analysis, and Griffin-Lim turns predicted mels back into
//! audio.

mod mel;
mod pitch;
mod reconstruct;
mod wav;

use thiserror::Error;

pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, stft_magnitude, MelConfig, MelFilterbank, MelSpectrogram};
pub use pitch::{estimate_f0, PitchConfig, PitchContour};
pub use reconstruct::{griffin_lim, griffin_lim_traced};
pub use wav::{load_wav, save_wav, Waveform};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("wav: {0}")]
    Wav(String),
    #[error("unsupported wav: {field}={value} unsupported")]
    Unsupported { field: &'static str, value: String },
    #[error("waveform of {len} samples is shorter than n_fft={n_fft}")]
    TooShort { len: usize, n_fft: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
}
