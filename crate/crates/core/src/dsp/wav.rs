use std::path::Path;

use super::DspError;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }
}

/// Reads a RIFF/WAVE file holding 16-bit PCM mono audio.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, DspError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => DspError::Io { path: path.display().to_string(), source },
        other => DspError::Wav(format!("{}: {}", path.display(), other)),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::Unsupported { field: "channels", value: spec.channels.to_string() });
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(DspError::Unsupported { field: "format", value: "float".into() });
    }
    if spec.bits_per_sample != 16 {
        return Err(DspError::Unsupported { field: "bits_per_sample", value: spec.bits_per_sample.to_string() });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DspError::Wav(e.to_string()))?;
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Writes 16-bit PCM mono; samples outside `[-1, 1]` are clipped.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| DspError::Wav(format!("{}: {}", path.display(), e)))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| DspError::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| DspError::Wav(e.to_string()))
}
