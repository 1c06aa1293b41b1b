use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use ctts_core::eval::variation_analysis;

use crate::common::{create_dir, emit_json, usage, wav_mel, write_file};
use crate::synth::load_for_inference;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Text to speak under every context
    #[arg(long)]
    pub text: String,
    /// File listing context WAVs, one per line, relative to the file
    #[arg(long, value_name = "PATH")]
    pub contexts: Option<PathBuf>,
    /// Context WAV; repeatable, added after the list
    #[arg(long, value_name = "WAV")]
    pub context: Vec<PathBuf>,
    /// Config file of rendering keys (Griffin-Lim, pitch, max frames)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one rendering key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Dropout seed, shared by every rendition
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `contour_###.csv` and `summary.json`
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn run(args: &Args, out: &mut dyn Write, _err: &mut dyn Write) -> Result<()> {
    let mut paths = Vec::new();
    if let Some(list) = &args.contexts {
        let base = list.parent().unwrap_or(std::path::Path::new("."));
        let text = fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
        paths.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| base.join(l)));
    }
    paths.extend(args.context.iter().cloned());
    if paths.len() < 2 {
        return Err(usage("analyze needs at least two contexts (--contexts LIST or repeated --context)"));
    }
    let state = load_for_inference(&args.checkpoint, args.config.as_deref(), &args.sets)?;
    let mels = paths.iter().map(|p| wav_mel(p, &state.config)).collect::<Result<Vec<_>>>()?;
    let report = variation_analysis(&state, &args.text, &mels, args.seed)?;
    create_dir(&args.out)?;
    for (i, c) in report.contours.iter().enumerate() {
        write_file(args.out.join(format!("contour_{i:03}.csv")), c.to_csv())?;
    }
    emit_json(out, Some(&args.out), "summary.json", &report.summary_json())
}
