use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::BigramPair;
use crate::dsp::MelSpectrogram;
use crate::model::Variant;

use super::{derive_seed, TrainConfig, TrainError};

pub(crate) const TAG_EPOCH: u64 = 1;
pub(crate) const TAG_SWAP: u64 = 2;
pub(crate) const TAG_CONTEXT: u64 = 3;
pub(crate) const TAG_SESSION: u64 = 4;
pub(crate) const TAG_VAL: u64 = 5;

/// Batches per shuffle window that get sorted by length together.
const BUCKET_WINDOW: usize = 8;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub key: String,
    pub text: String,
    pub mel: MelSpectrogram,
}

/// Utterances with their `(N−1, N)` pairs as indices.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub pairs: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>, pairs: Vec<(usize, usize)>) -> Result<Self, TrainError> {
        let n = utterances.len();
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(TrainError::Data(format!("pair ({a}, {b}) refers past {n} utterances")));
        }
        Ok(Dataset { utterances, pairs })
    }

    /// Collects the utterances of `pairs`, taking mels from `mels` keyed by
    /// utterance ID.
    pub fn from_bigrams(pairs: &[BigramPair], mels: &HashMap<String, MelSpectrogram>) -> Result<Self, TrainError> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut utterances = Vec::new();
        let mut idx = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut slot = |r: &crate::corpus::UtteranceRecord| -> Result<usize, TrainError> {
                if let Some(&i) = index.get(&r.id.raw) {
                    return Ok(i);
                }
                let mel = mels.get(&r.id.raw).ok_or_else(|| TrainError::Data(format!("no features for {}", r.id.raw)))?;
                utterances.push(Utterance { key: r.id.raw.clone(), text: r.text.clone(), mel: mel.clone() });
                index.insert(r.id.raw.clone(), utterances.len() - 1);
                Ok(utterances.len() - 1)
            };
            let a = slot(&p.prev)?;
            let b = slot(&p.curr)?;
            idx.push((a, b));
        }
        Dataset::new(utterances, idx)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderSample<T> {
    pub a: T,
    pub b: T,
    /// 1 when `(a, b)` is the original `(N−1, N)` order.
    pub label: u8,
}

pub fn order_swap_sample<T, R: Rng + ?Sized>(prev: T, curr: T, swap_prob: f64, rng: &mut R) -> OrderSample<T> {
    if rng.gen_bool(swap_prob) {
        OrderSample { a: curr, b: prev, label: 0 }
    } else {
        OrderSample { a: prev, b: curr, label: 1 }
    }
}

/// One optimization (or evaluation) batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<usize>,
    /// Utterance whose mel feeds the context encoder, per pair.
    pub contexts: Vec<usize>,
    /// Order-task presentation, per pair.
    pub swaps: Vec<bool>,
    /// Seed of the forward session (dropout masks).
    pub seed: u64,
}

/// Deterministic batch schedule: batch `i` depends only on the seed, `i`
/// and the dataset.
///
/// Each epoch shuffles the pairs, sorts windows of a few batches by target
/// length, cuts them into batches and shuffles the batch order. A partial
/// last batch is dropped (the shuffle changes which pairs miss out).
pub struct Batcher {
    cfg: TrainConfig,
    lengths: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    n_utterances: usize,
    plan: Option<(u64, Vec<Vec<usize>>)>,
}

impl Batcher {
    pub fn new(data: &Dataset, cfg: &TrainConfig) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        if cfg.variant == Variant::RandomContext && data.utterances.len() < 3 {
            return Err(TrainError::Data("random contexts need at least 3 utterances".into()));
        }
        Ok(Batcher {
            cfg: cfg.clone(),
            lengths: data.pairs.iter().map(|&(_, b)| data.utterances[b].mel.n_frames).collect(),
            pairs: data.pairs.clone(),
            n_utterances: data.utterances.len(),
            plan: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.pairs.len() / self.cfg.batch_size).max(1) as u64
    }

    fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_EPOCH, epoch]));
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        let b = self.cfg.batch_size.min(order.len());
        order.truncate(self.batches_per_epoch() as usize * b);
        for window in order.chunks_mut(b * BUCKET_WINDOW) {
            window.sort_by_key(|&i| self.lengths[i]);
        }
        let mut batches: Vec<Vec<usize>> = order.chunks(b).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut rng);
        batches
    }

    /// Context utterance for pair `p` during `epoch`. Random-context
    /// training draws uniformly from every utterance other than the pair's
    /// own two, fixed within an epoch.
    pub fn context_for(&self, epoch: u64, p: usize) -> usize {
        let (prev, curr) = self.pairs[p];
        if self.cfg.variant != Variant::RandomContext {
            return prev;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_CONTEXT, epoch, p as u64]));
        let (lo, hi) = (prev.min(curr), prev.max(curr));
        let skip = if lo == hi { 1 } else { 2 };
        let mut c = rng.gen_range(0..self.n_utterances - skip);
        if c >= lo {
            c += 1;
        }
        if skip == 2 && c >= hi {
            c += 1;
        }
        c
    }

    fn swaps(&self, path: &[u64], n: usize) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, path));
        (0..n).map(|_| order_swap_sample(false, true, self.cfg.swap_prob, &mut rng).a).collect()
    }

    pub fn batch(&mut self, iteration: u64) -> Batch {
        let bpe = self.batches_per_epoch();
        let epoch = iteration / bpe;
        if self.plan.as_ref().map(|p| p.0) != Some(epoch) {
            self.plan = Some((epoch, self.epoch_plan(epoch)));
        }
        let pairs = self.plan.as_ref().expect("plan was just built").1[(iteration % bpe) as usize].clone();
        let contexts = pairs.iter().map(|&p| self.context_for(epoch, p)).collect();
        let swaps = self.swaps(&[TAG_SWAP, iteration], pairs.len());
        Batch { pairs, contexts, swaps, seed: derive_seed(self.cfg.seed, &[TAG_SESSION, iteration]) }
    }

    /// Every pair of the dataset in fixed order, for validation at
    /// `iteration`.
    pub fn eval_batches(&self, iteration: u64) -> Vec<Batch> {
        (0..self.pairs.len())
            .collect::<Vec<_>>()
            .chunks(self.cfg.batch_size)
            .enumerate()
            .map(|(k, chunk)| Batch {
                pairs: chunk.to_vec(),
                contexts: chunk.iter().map(|&p| self.context_for(0, p)).collect(),
                swaps: self.swaps(&[TAG_VAL, TAG_SWAP, iteration, k as u64], chunk.len()),
                seed: derive_seed(self.cfg.seed, &[TAG_VAL, TAG_SESSION, iteration, k as u64]),
            })
            .collect()
    }
}
