//! Named-tensor container and training checkpoints.
//!
//! Layout: magic `CTTS1`, format version (u32), then records until end of
//! file. A record is a name length (u32), the UTF-8 name, a rank (u32), the
//! dims (u32 each) and the values as little-endian `f32`. All integers are
//! little-endian.
//!
//! Text metadata (config, vocabulary, iteration) is stored as rank-1 tensors
//! of code points, which `f32` represents exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::model::Vocab;

use super::step::{Adam, TrainState};
use super::TrainError;

pub const MAGIC: &[u8; 5] = b"CTTS1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn encode_container(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + records.iter().map(|(n, t)| n.len() + 12 + 4 * (t.rank() + t.numel())).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Truncated(format!("file ends inside {what} at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn decode_container(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, TrainError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::NotACheckpoint);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32("the version field")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("a record header")? as usize;
        let name = std::str::from_utf8(r.take(len, "a record name")?).map_err(|_| TrainError::Checkpoint("record name is not UTF-8".into()))?.to_string();
        let rank = r.u32(&format!("record {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("record {name}"))? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| TrainError::Checkpoint(format!("record {name}: dims overflow")))?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &format!("record {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(format!("record {name}: {e}")))?;
        records.push((name, t));
    }
    Ok(records)
}

pub fn write_container(path: impl AsRef<Path>, records: &[(String, Tensor<f32>)]) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, encode_container(records)).map_err(|e| TrainError::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>, TrainError> {
    let path = path.as_ref();
    decode_container(&fs::read(path).map_err(|e| TrainError::io(path, e))?)
}

/// Text as a rank-1 tensor of code points.
pub fn text_tensor(s: &str) -> Tensor<f32> {
    Tensor::vector(s.chars().map(|c| c as u32 as f32).collect())
}

pub fn tensor_text(t: &Tensor<f32>) -> Result<String, TrainError> {
    t.data()
        .iter()
        .map(|&v| {
            let code = v as u32;
            if code as f32 != v {
                return None;
            }
            char::from_u32(code)
        })
        .collect::<Option<String>>()
        .ok_or_else(|| TrainError::Checkpoint("corrupt text record".into()))
}

pub(crate) fn checkpoint_records(state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    let vocab: String = state.model.vocab.chars().iter().collect();
    let mut recs = vec![
        ("meta.config".to_string(), text_tensor(&state.config.render())),
        ("meta.vocab".to_string(), text_tensor(&vocab)),
        ("meta.iteration".to_string(), text_tensor(&state.iteration.to_string())),
    ];
    for (id, name, t) in state.params.iter() {
        recs.push((format!("param.{name}"), t.clone()));
        if state.params.is_trainable(id) {
            recs.push((format!("adam.m.{name}"), state.adam.m[id.0].clone()));
            recs.push((format!("adam.v.{name}"), state.adam.v[id.0].clone()));
        }
    }
    recs
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    write_container(path, &checkpoint_records(state))
}

pub(crate) fn state_from_records(records: Vec<(String, Tensor<f32>)>) -> Result<TrainState, TrainError> {
    let mut map: HashMap<String, Tensor<f32>> = HashMap::with_capacity(records.len());
    for (name, t) in records {
        if map.insert(name.clone(), t).is_some() {
            return Err(TrainError::Checkpoint(format!("record {name} appears twice")));
        }
    }
    let mut text = |key: &str| -> Result<String, TrainError> {
        tensor_text(&map.remove(key).ok_or_else(|| TrainError::Checkpoint(format!("missing record {key}")))?)
    };
    let config = Config::parse(&text("meta.config")?).map_err(|e| TrainError::Checkpoint(format!("config: {e}")))?;
    let vocab = Vocab::new(text("meta.vocab")?.chars().collect())?;
    let iteration: u64 = text("meta.iteration")?.parse().map_err(|_| TrainError::Checkpoint("bad iteration record".into()))?;
    let mut state = TrainState::new(config, vocab)?;
    state.iteration = iteration;
    let ids: Vec<_> = state.params.ids().collect();
    let mut take = |key: String, shape: &[usize]| -> Result<Tensor<f32>, TrainError> {
        let t = map.remove(&key).ok_or_else(|| TrainError::Checkpoint(format!("missing record {key}")))?;
        if t.shape() != shape {
            return Err(TrainError::Checkpoint(format!("record {key} has shape {:?}, expected {:?}", t.shape(), shape)));
        }
        Ok(t)
    };
    let mut adam = Adam::new(&state.params);
    for id in ids {
        let name = state.params.name(id).to_string();
        let shape = state.params.get(id).shape().to_vec();
        *state.params.get_mut(id) = take(format!("param.{name}"), &shape)?;
        if state.params.is_trainable(id) {
            adam.m[id.0] = take(format!("adam.m.{name}"), &shape)?;
            adam.v[id.0] = take(format!("adam.v.{name}"), &shape)?;
        }
    }
    if let Some(extra) = map.keys().min() {
        return Err(TrainError::Checkpoint(format!("unexpected record {extra}")));
    }
    state.adam = adam;
    Ok(state)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    state_from_records(read_container(path)?)
}
