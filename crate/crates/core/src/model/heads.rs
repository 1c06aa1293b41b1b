use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, Var};
use crate::nets::{BatchNorm1d, Linear, NetError, ParamStore, Session};

pub const ORDER_DIMS: [[usize; 2]; 4] = [[512, 256], [256, 128], [128, 64], [64, 1]];
pub const NEXT_DIMS: [[usize; 2]; 5] = [[256, 128], [128, 64], [64, 64], [64, 128], [128, 256]];

/// Feed-forward stack: every hidden layer is `Linear → BatchNorm → ReLU`
/// (bias-free, since the norm's shift takes its place),
/// the last layer is linear, and one dropout follows hidden layer
/// `dropout_after` (1-based).
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
    pub norms: Vec<BatchNorm1d>,
    pub dropout_after: usize,
    pub dropout: f64,
}

impl MlpHead {
    fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[[usize; 2]],
        dropout_after: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        let mut layers = Vec::with_capacity(dims.len());
        let mut norms = Vec::with_capacity(dims.len() - 1);
        for (i, &[d_in, d_out]) in dims.iter().enumerate() {
            let fc = format!("{name}.fc{}", i + 1);
            if i + 1 == dims.len() {
                layers.push(Linear::new(store, &fc, d_in, d_out, rng)?);
            } else {
                layers.push(Linear::without_bias(store, &fc, d_in, d_out, rng)?);
                norms.push(BatchNorm1d::new(store, &format!("{name}.bn{}", i + 1), d_out)?);
            }
        }
        Ok(MlpHead { layers, norms, dropout_after, dropout })
    }

    pub fn dims(&self) -> Vec<[usize; 2]> {
        self.layers.iter().map(Linear::dims).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i < last {
                h = self.norms[i].forward(s, h)?;
                h = s.graph.relu(h)?;
                if i + 1 == self.dropout_after {
                    h = s.dropout(h, self.dropout)?;
                }
            }
        }
        Ok(h)
    }
}

/// Order classifier over `concat(e_a, e_b)`: dropout sits before the output
/// layer.
#[derive(Clone, Debug)]
pub struct OrderHead(pub MlpHead);

impl OrderHead {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        Ok(OrderHead(MlpHead::new(store, name, &ORDER_DIMS, ORDER_DIMS.len() - 1, dropout, rng)?))
    }

    /// Pre-sigmoid logits `[N, 1]` for embeddings `e_a, e_b: [N, 256]`.
    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, e_a: Var, e_b: Var) -> Result<Var, NetError> {
        let x = s.graph.concat(&[e_a, e_b], 1)?;
        self.0.forward(s, x)
    }
}

/// Next-embedding regressor: dropout sits after the middle (third) layer.
#[derive(Clone, Debug)]
pub struct NextHead(pub MlpHead);

impl NextHead {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        Ok(NextHead(MlpHead::new(store, name, &NEXT_DIMS, 3, dropout, rng)?))
    }

    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, e_prev: Var) -> Result<Var, NetError> {
        self.0.forward(s, e_prev)
    }
}
