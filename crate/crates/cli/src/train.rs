use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctts_core::config::Config;
use ctts_core::corpus::{parse_manifest, BigramPair, IdFormat, UtteranceRecord};
use ctts_core::dsp::MelSpectrogram;
use ctts_core::model::Vocab;
use ctts_core::train::{load_checkpoint, run_training, Dataset, TrainState};

use crate::common::{build_config, create_dir, read_features, FEATURES, MANIFEST};

/// Keys a resumed run may change.
const RESUME_KEYS: [&str; 3] = ["train.max_iters", "train.log_every", "train.checkpoint_every"];

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory written by `prepare`
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Config file of `key=value` lines, applied over the prepared config
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Training seed (overrides `train.seed`)
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and `metrics.jsonl`
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint; only the train schedule keys may change
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn split(data: &Path, name: &str, records: &HashMap<String, UtteranceRecord>, mels: &HashMap<String, MelSpectrogram>) -> Result<Dataset> {
    let path = data.join(format!("{name}.txt"));
    let mut pairs = Vec::new();
    for (curr, prev) in parse_manifest(&read(&path)?, &IdFormat::default()).with_context(|| path.display().to_string())? {
        let prev = prev.ok_or_else(|| anyhow!("{}: {} has no predecessor", path.display(), curr.id))?;
        let prev = records.get(&prev).ok_or_else(|| anyhow!("{}: predecessor {prev} is not in the manifest", path.display()))?;
        pairs.push(BigramPair { prev: prev.clone(), curr });
    }
    Dataset::from_bigrams(&pairs, mels).with_context(|| format!("{name} split"))
}

pub fn run(args: &Args, out: &mut dyn Write, _err: &mut dyn Write) -> Result<()> {
    let manifest = parse_manifest(&read(&args.data.join(MANIFEST))?, &IdFormat::default())?;
    let vocab = Vocab::from_texts(manifest.iter().map(|(r, _)| r.text.as_str()))?;
    let records: HashMap<String, UtteranceRecord> = manifest.into_iter().map(|(r, _)| (r.id.raw.clone(), r)).collect();

    let mut state = match &args.resume {
        Some(path) => {
            let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if args.seed.is_some_and(|s| s != state.config.train.seed) {
                bail!("--seed differs from the checkpoint's train.seed {}", state.config.train.seed);
            }
            if state.model.vocab != vocab {
                bail!("the checkpoint's vocabulary does not match the prepared data");
            }
            let config = build_config(state.config.clone(), args.config.as_deref(), &args.sets, Some(&RESUME_KEYS))?;
            TrainState { config, ..state }
        }
        None => {
            let config_path = args.data.join("config.txt");
            let base = if config_path.exists() { Config::parse(&read(&config_path)?).with_context(|| config_path.display().to_string())? } else { Config::default() };
            let mut config = build_config(base, args.config.as_deref(), &args.sets, None)?;
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            TrainState::new(config, vocab)?
        }
    };

    let mels = read_features(&args.data.join(FEATURES), &state.config)?;
    let train = split(&args.data, "train", &records, &mels)?;
    let val = split(&args.data, "val", &records, &mels)?;

    create_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    let start = state.iteration;
    let (_, checkpoints) = run_training(&mut state, &train, (!val.is_empty()).then_some(&val), &mut metrics, Some(&args.out))?;
    metrics.flush().with_context(|| format!("writing {}", metrics_path.display()))?;
    writeln!(
        out,
        "trained {} from iteration {start} to {} on {} pairs; {} checkpoints in {}",
        state.config.train.variant.name(),
        state.iteration,
        train.len(),
        checkpoints.len(),
        args.out.display()
    )?;
    Ok(())
}
