//! Neural building blocks: parameter storage, a per-pass forward session,
//! linear/GRU/conv/batch-norm layers and the style-token encoder.
//!
//! Layers only hold [`ParamId`]s and dimensions. Values live in a
//! [`ParamStore`], so the same architecture runs in `f32` for training and
//! `f64` for gradient verification.

mod gradcheck;
mod gst;
mod layers;
mod session;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Tensor};

pub use gradcheck::{check_gradients, check_gradients_against, GradCheck, GradCheckReport, ParamCheck};
pub use gst::{GstConfig, GstEncoder, ReferenceEncoder, StyleAttention, StyleTokenBank};
pub use layers::{BatchNorm1d, Conv2dLayer, Gru, GruCell, Linear};
pub use session::Session;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{layer}: {detail}")]
    Input { layer: String, detail: String },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}

impl NetError {
    pub(crate) fn input(layer: &str, detail: impl Into<String>) -> Self {
        NetError::Input { layer: layer.to_string(), detail: detail.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named tensors: trainable parameters plus non-trainable buffers such as
/// batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId, NetError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NetError::DuplicateParam(name));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Same names and layout, values converted to another precision.
    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &tr)| tr).map(|(t, _)| t.numel()).sum()
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub(crate) fn uniform<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// Glorot/Xavier uniform bound for a `fan_out x fan_in` weight.
pub(crate) fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Adds a trainable `[rows, cols]` weight with Xavier-uniform values.
pub fn uniform_param<F: Element>(store: &mut ParamStore<F>, name: &str, shape: &[usize; 2], rng: &mut ChaCha8Rng) -> Result<ParamId, NetError> {
    store.add(name, uniform(rng, shape, xavier_bound(shape[1], shape[0])), true)
}
