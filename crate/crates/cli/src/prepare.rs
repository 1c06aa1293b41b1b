use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use ctts_core::config::Config;
use ctts_core::corpus::{build_bigram_pairs, parse_metadata, render_manifest, split_dataset, BigramPair, SplitSpec, UtteranceRecord};

use crate::common::{build_config, create_dir, usage, wav_mel, write_features, write_file, FEATURES, MANIFEST};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Corpus root holding the metadata file and `wavs/ID.wav`
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Metadata file (`ID|raw|normalized`); defaults to `DIR/metadata.csv`
    #[arg(long, value_name = "PATH")]
    pub metadata: Option<PathBuf>,
    /// Training pairs; defaults to every pair not taken by val and test
    #[arg(long, value_name = "N")]
    pub train: Option<usize>,
    /// Validation pairs
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub val: usize,
    /// Test pairs
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub test: usize,
    /// Config file of `key=value` lines (only `dsp.*` keys matter here)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Split seed
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// One manifest line per pair: the current utterance and its predecessor.
fn split_lines(pairs: &[BigramPair]) -> String {
    let mut sorted: Vec<&BigramPair> = pairs.iter().collect();
    sorted.sort_by_key(|p| p.curr.id.key());
    sorted.iter().map(|p| format!("{}|{}|{}|{}\n", p.curr.id.raw, p.curr.raw_text, p.curr.text, p.prev.id.raw)).collect()
}

pub fn run(args: &Args, out: &mut dyn Write, _err: &mut dyn Write) -> Result<()> {
    let cfg = build_config(Config::default(), args.config.as_deref(), &args.sets, None)?;
    let meta_path = args.metadata.clone().unwrap_or_else(|| args.corpus.join("metadata.csv"));
    let source = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let records = parse_metadata(&source).with_context(|| meta_path.display().to_string())?;
    let pairs = build_bigram_pairs(&records)?;
    let held_out = args.val + args.test;
    let train = match args.train {
        Some(n) => n,
        None => pairs.len().checked_sub(held_out).ok_or_else(|| usage(format!("--val and --test ask for {held_out} pairs but the corpus has {}", pairs.len())))?,
    };
    let splits = split_dataset(&pairs, &SplitSpec { train_count: train, val_count: args.val, test_count: args.test, seed: args.seed })?;

    let mut used: BTreeMap<_, &UtteranceRecord> = BTreeMap::new();
    for p in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        used.insert(p.prev.id.key(), &p.prev);
        used.insert(p.curr.id.key(), &p.curr);
    }
    let mut mels = Vec::with_capacity(used.len());
    for r in used.values() {
        mels.push((r.id.raw.clone(), wav_mel(&r.audio_under(&args.corpus), &cfg)?));
    }

    create_dir(&args.out)?;
    write_file(args.out.join(MANIFEST), render_manifest(&records)?)?;
    for (name, split) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_file(args.out.join(format!("{name}.txt")), split_lines(split))?;
    }
    write_features(&args.out.join(FEATURES), &cfg, &mels)?;
    write_file(args.out.join("config.txt"), cfg.render())?;
    writeln!(
        out,
        "prepared {} utterances, {} pairs (train {}, val {}, test {}), {} feature sets in {}",
        records.len(),
        pairs.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        mels.len(),
        args.out.display()
    )?;
    Ok(())
}
