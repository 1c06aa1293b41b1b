//! Utterance metadata, bigram pairing and dataset splits.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("duplicate utterance {0}")]
    Duplicate(String),
    #[error("split needs {requested} pairs but only {available} are available")]
    Infeasible { requested: usize, available: usize },
}

/// Shape of an utterance ID: `{prefix}{chapter}-{chunk}` with fixed digit
/// counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdFormat {
    pub prefix: String,
    pub chapter_digits: usize,
    pub chunk_digits: usize,
}

impl Default for IdFormat {
    fn default() -> Self {
        IdFormat { prefix: "LJ".into(), chapter_digits: 3, chunk_digits: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UtteranceId {
    pub chapter: u32,
    pub chunk: u32,
    pub raw: String,
}

impl UtteranceId {
    pub fn parse(s: &str, fmt: &IdFormat) -> Result<Self, String> {
        let body = s.strip_prefix(fmt.prefix.as_str()).ok_or_else(|| format!("id {s:?} lacks prefix {:?}", fmt.prefix))?;
        let (ch, ck) = body.split_once('-').ok_or_else(|| format!("id {s:?} lacks '-'"))?;
        let digits = |part: &str, n: usize, what: &str| -> Result<u32, String> {
            if part.len() != n || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("id {s:?}: {what} must be {n} digits"));
            }
            let v: u32 = part.parse().map_err(|_| format!("id {s:?}: {what} out of range"))?;
            if v == 0 {
                return Err(format!("id {s:?}: {what} must be positive"));
            }
            Ok(v)
        };
        Ok(UtteranceId {
            chapter: digits(ch, fmt.chapter_digits, "chapter")?,
            chunk: digits(ck, fmt.chunk_digits, "chunk")?,
            raw: s.to_string(),
        })
    }

    /// Zero-padded rendering of `(chapter, chunk)`.
    pub fn render(chapter: u32, chunk: u32, fmt: &IdFormat) -> String {
        format!("{}{:0cw$}-{:0kw$}", fmt.prefix, chapter, chunk, cw = fmt.chapter_digits, kw = fmt.chunk_digits)
    }

    pub fn new(chapter: u32, chunk: u32, fmt: &IdFormat) -> Self {
        UtteranceId { chapter, chunk, raw: Self::render(chapter, chunk, fmt) }
    }

    pub fn key(&self) -> (u32, u32) {
        (self.chapter, self.chunk)
    }
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: UtteranceId,
    pub raw_text: String,
    /// Normalized transcript.
    pub text: String,
    /// Relative to the corpus root.
    pub audio_path: PathBuf,
}

impl UtteranceRecord {
    pub fn audio_under(&self, root: &Path) -> PathBuf {
        root.join(&self.audio_path)
    }

    fn line(&self) -> String {
        format!("{}|{}|{}", self.id.raw, self.raw_text, self.text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BigramPair {
    pub prev: UtteranceRecord,
    pub curr: UtteranceRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<BigramPair>,
    pub val: Vec<BigramPair>,
    pub test: Vec<BigramPair>,
}

fn default_audio_path(id: &str) -> PathBuf {
    Path::new("wavs").join(format!("{id}.wav"))
}

/// Parses `ID|raw text|normalized text` lines, keeping file order.
pub fn parse_metadata(source: &str) -> Result<Vec<UtteranceRecord>, CorpusError> {
    parse_metadata_with(source, &IdFormat::default())
}

pub fn parse_metadata_with(source: &str, fmt: &IdFormat) -> Result<Vec<UtteranceRecord>, CorpusError> {
    source
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let err = |detail: String| CorpusError::Parse { line: i + 1, detail };
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 '|'-separated fields, found {}", fields.len())));
            }
            let id = UtteranceId::parse(fields[0], fmt).map_err(err)?;
            if fields[2].trim().is_empty() {
                return Err(err("empty normalized text".into()));
            }
            Ok(UtteranceRecord {
                audio_path: default_audio_path(&id.raw),
                id,
                raw_text: fields[1].to_string(),
                text: fields[2].to_string(),
            })
        })
        .collect()
}

/// Inverse of [`parse_metadata`]: one newline-terminated line per record.
pub fn render_metadata(records: &[UtteranceRecord]) -> String {
    records.iter().map(|r| r.line() + "\n").collect()
}

fn sorted_unique(records: &[UtteranceRecord]) -> Result<Vec<&UtteranceRecord>, CorpusError> {
    let mut sorted: Vec<&UtteranceRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id.key());
    for w in sorted.windows(2) {
        if w[0].id.key() == w[1].id.key() {
            return Err(CorpusError::Duplicate(w[1].id.raw.clone()));
        }
    }
    Ok(sorted)
}

/// A pair for every record whose immediate predecessor (same chapter,
/// previous chunk) is present, in `(chapter, chunk)` order.
pub fn build_bigram_pairs(records: &[UtteranceRecord]) -> Result<Vec<BigramPair>, CorpusError> {
    let sorted = sorted_unique(records)?;
    Ok(sorted
        .windows(2)
        .filter(|w| w[0].id.chapter == w[1].id.chapter && w[0].id.chunk + 1 == w[1].id.chunk)
        .map(|w| BigramPair { prev: w[0].clone(), curr: w[1].clone() })
        .collect())
}

/// Seeded random assignment of pairs to train/val/test with exact sizes.
pub fn split_dataset(pairs: &[BigramPair], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    let requested = spec.train_count + spec.val_count + spec.test_count;
    if requested > pairs.len() {
        return Err(CorpusError::Infeasible { requested, available: pairs.len() });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| pairs[i].clone()).collect();
    let (a, b) = (spec.train_count, spec.train_count + spec.val_count);
    Ok(Splits { train: take(0..a), val: take(a..b), test: take(b..requested) })
}

/// Manifest lines: the metadata fields plus the predecessor ID or `-`.
pub fn render_manifest(records: &[UtteranceRecord]) -> Result<String, CorpusError> {
    let sorted = sorted_unique(records)?;
    let present: HashMap<(u32, u32), &str> = sorted.iter().map(|r| (r.id.key(), r.id.raw.as_str())).collect();
    Ok(records
        .iter()
        .map(|r| {
            let prev = r.id.chunk.checked_sub(1).and_then(|c| present.get(&(r.id.chapter, c)).copied()).unwrap_or("-");
            format!("{}|{}\n", r.line(), prev)
        })
        .collect())
}

/// Records of a manifest with their predecessor IDs.
pub fn parse_manifest(source: &str, fmt: &IdFormat) -> Result<Vec<(UtteranceRecord, Option<String>)>, CorpusError> {
    source
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let (meta, prev) = line.rsplit_once('|').ok_or_else(|| CorpusError::Parse { line: i + 1, detail: "missing predecessor field".into() })?;
            let rec = parse_metadata_with(meta, fmt)
                .map_err(|e| match e {
                    CorpusError::Parse { detail, .. } => CorpusError::Parse { line: i + 1, detail },
                    other => other,
                })?
                .pop()
                .ok_or_else(|| CorpusError::Parse { line: i + 1, detail: "empty line".into() })?;
            let prev = (prev != "-").then(|| prev.to_string());
            Ok((rec, prev))
        })
        .collect()
}
