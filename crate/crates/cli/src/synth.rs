use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use ctts_core::autodiff::Tensor;
use ctts_core::dsp::save_wav;
use ctts_core::model::{synthesize, SynthesisRequest};
use ctts_core::train::{load_checkpoint, write_container, TrainState};

use crate::common::{build_config, create_dir, mel_record, wav_mel, RUNTIME_KEYS};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Text to speak
    #[arg(long)]
    pub text: String,
    /// Context utterance (WAV); ignored by baseline checkpoints
    #[arg(long, value_name = "WAV")]
    pub context: Option<PathBuf>,
    /// Config file of rendering keys (Griffin-Lim, pitch, max frames)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one rendering key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Dropout seed
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `mel.ctts` and `synth.wav`
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Checkpoint with rendering keys overridden.
pub fn load_for_inference(path: &std::path::Path, file: Option<&std::path::Path>, sets: &[String]) -> Result<TrainState> {
    let mut state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    state.config = build_config(state.config.clone(), file, sets, Some(&RUNTIME_KEYS))?;
    state.model.cfg.max_frames = state.config.model.max_frames;
    Ok(state)
}

pub fn run(args: &Args, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let state = load_for_inference(&args.checkpoint, args.config.as_deref(), &args.sets)?;
    let cfg = &state.config;
    let variant = state.model.variant;
    let context = match &args.context {
        Some(path) if !variant.uses_context() => {
            writeln!(err, "warning: the {} model takes no context input; ignoring --context {}", variant.name(), path.display())?;
            None
        }
        Some(path) => Some(wav_mel(path, cfg)?),
        None => None,
    };
    let syn = synthesize(
        &state.model,
        &state.params,
        &cfg.mel,
        &SynthesisRequest {
            text: &args.text,
            context: context.as_ref(),
            seed: args.seed,
            max_frames: cfg.model.max_frames,
            griffin_lim_iters: cfg.griffin_lim_iters.max(1),
        },
    )?;
    create_dir(&args.out)?;
    let records = vec![("mel".to_string(), mel_record(&syn.mel)), ("stop_logits".to_string(), Tensor::vector(syn.stop_logits.clone()))];
    write_container(args.out.join("mel.ctts"), &records)?;
    let wave = syn.waveform.expect("Griffin-Lim ran");
    save_wav(args.out.join("synth.wav"), &wave)?;
    writeln!(out, "synthesized {} frames ({:.3} s) with the {} model into {}", syn.mel.n_frames, wave.duration_s(), variant.name(), args.out.display())?;
    Ok(())
}
