use std::fmt::Write as _;

use super::Waveform;

#[derive(Clone, Debug, PartialEq)]
pub struct PitchConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Minimum normalized autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig { frame_ms: 25.0, hop_ms: 10.0, f_min: 60.0, f_max: 400.0, voicing_threshold: 0.5 }
    }
}

/// Per-frame F0; `None` marks an unvoiced frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PitchContour {
    pub points: Vec<(f64, Option<f64>)>,
}

impl PitchContour {
    pub fn voiced(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.1).collect()
    }

    pub fn median_f0(&self) -> Option<f64> {
        let mut v = self.voiced();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    /// `time_s,f0_hz` rows; unvoiced frames leave the f0 field empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_s,f0_hz\n");
        for (t, f) in &self.points {
            match f {
                Some(f) => writeln!(s, "{:.6},{:.4}", t, f),
                None => writeln!(s, "{:.6},", t),
            }
            .expect("writing to a String");
        }
        s
    }
}

/// Normalized autocorrelation of `frame` at `lag` over the overlapping span.
fn nacf(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (a, b) = (&frame[..n], &frame[lag..]);
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        xy += a[i] * b[i];
        xx += a[i] * a[i];
        yy += b[i] * b[i];
    }
    let d = (xx * yy).sqrt();
    if d <= 1e-12 {
        0.0
    } else {
        xy / d
    }
}

/// Autocorrelation pitch tracker: for each frame, the lag in
/// `[rate/f_max, rate/f_min]` with the strongest normalized autocorrelation
/// (preferring the shortest lag among near-equal peaks, which suppresses
/// octave-down errors), refined by parabolic interpolation.
pub fn estimate_f0(w: &Waveform, cfg: &PitchConfig) -> PitchContour {
    let rate = w.sample_rate as f64;
    let frame_len = (cfg.frame_ms * rate / 1000.0).round() as usize;
    let hop = ((cfg.hop_ms * rate / 1000.0).round() as usize).max(1);
    let min_lag = ((rate / cfg.f_max).floor() as usize).max(1);
    let max_lag = ((rate / cfg.f_min).ceil() as usize).min(frame_len.saturating_sub(2));
    let mut contour = PitchContour::default();
    if frame_len == 0 || w.samples.len() < frame_len {
        return contour;
    }
    let n_frames = (w.samples.len() - frame_len) / hop + 1;
    for t in 0..n_frames {
        let start = t * hop;
        let time = (start as f64 + frame_len as f64 / 2.0) / rate;
        let raw = &w.samples[start..start + frame_len];
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / frame_len as f64;
        let frame: Vec<f64> = raw.iter().map(|&v| v as f64 - mean).collect();
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        if energy < 1e-10 || max_lag <= min_lag + 1 {
            contour.points.push((time, None));
            continue;
        }
        let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(|lag| nacf(&frame, lag)).collect();
        // r[j] corresponds to lag min_lag - 1 + j
        let best = (1..r.len() - 1).map(|j| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let pick = (1..r.len() - 1).find(|&j| r[j] >= 0.95 * best && r[j] >= r[j - 1] && r[j] >= r[j + 1]);
        let Some(j) = pick else {
            contour.points.push((time, None));
            continue;
        };
        if r[j] < cfg.voicing_threshold {
            contour.points.push((time, None));
            continue;
        }
        let (a, b, c) = (r[j - 1], r[j], r[j + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let lag = (min_lag - 1 + j) as f64 + shift;
        let f0 = (rate / lag).clamp(cfg.f_min, cfg.f_max);
        contour.points.push((time, Some(f0)));
    }
    contour
}
