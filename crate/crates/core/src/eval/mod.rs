//! Analyses over trained models and listening-test tables: the
//! context-variation experiment, Wilcoxon signed-rank with Bonferroni
//! correction, exact binomial preference tests and stimulus assembly.

mod stats;
mod tables;
mod variation;

use thiserror::Error;

use crate::dsp::{DspError, Waveform};
use crate::model::ModelError;

pub use stats::{binomial_test, bonferroni_adjust, preference_tally, wilcoxon_signed_rank, Adjusted, Tally, Wilcoxon, EXACT_MAX_N};
pub use tables::{Choice, PreferenceTable, PreferenceTrial, ScoreTable};
pub use variation::{variation_analysis, VariationReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate sample")]
    DegenerateSample,
    #[error("no context input")]
    NoContextInput,
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {detail}")]
    Table { line: u64, detail: String },
    #[error("missing score for listener {listener}, item {item}, system {system}")]
    MissingCell { listener: String, item: String, system: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `prev`, then `round(pause_ms · rate / 1000)` zero samples, then `curr`.
pub fn concat_with_pause(prev: &Waveform, curr: &Waveform, pause_ms: f64) -> Result<Waveform, EvalError> {
    if prev.sample_rate != curr.sample_rate {
        return Err(DspError::RateMismatch(prev.sample_rate, curr.sample_rate).into());
    }
    if !(pause_ms >= 0.0) || !pause_ms.is_finite() {
        return Err(EvalError::Invalid(format!("pause of {pause_ms} ms")));
    }
    let pause = (pause_ms * prev.sample_rate as f64 / 1000.0).round() as usize;
    let mut samples = Vec::with_capacity(prev.samples.len() + pause + curr.samples.len());
    samples.extend_from_slice(&prev.samples);
    samples.resize(prev.samples.len() + pause, 0.0);
    samples.extend_from_slice(&curr.samples);
    Ok(Waveform::new(samples, prev.sample_rate))
}
