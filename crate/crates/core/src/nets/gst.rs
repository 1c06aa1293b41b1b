use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, Var};

use super::{uniform, xavier_bound, Conv2dLayer, Gru, NetError, ParamId, ParamStore, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct GstConfig {
    pub n_mels: usize,
    pub conv_channels: Vec<usize>,
    pub ref_hidden: usize,
    pub tokens: usize,
    pub heads: usize,
    pub emb_dim: usize,
    pub tanh_tokens: bool,
}

impl Default for GstConfig {
    fn default() -> Self {
        GstConfig { n_mels: 80, conv_channels: vec![32, 32, 64], ref_hidden: 128, tokens: 10, heads: 4, emb_dim: 256, tanh_tokens: true }
    }
}

/// Stride-2 convolution stack over a `T × n_mels` map, flattened per
/// output time step and summarized by a GRU's final state.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub name: String,
    pub convs: Vec<Conv2dLayer>,
    pub gru: Gru,
    pub n_mels: usize,
}

impl ReferenceEncoder {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, cfg: &GstConfig, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut c_in = 1;
        let mut width = cfg.n_mels;
        for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
            let conv = Conv2dLayer::new(store, &format!("{name}.conv{i}"), c_in, c_out, 3, 2, 1, rng)?;
            width = conv.out_len(width);
            convs.push(conv);
            c_in = c_out;
        }
        let gru = Gru::new(store, &format!("{name}.gru"), c_in * width, cfg.ref_hidden, rng)?;
        Ok(ReferenceEncoder { name: name.to_string(), convs, gru, n_mels: cfg.n_mels })
    }

    /// Shortest input the stride stack accepts.
    pub fn min_frames(&self) -> usize {
        1 << self.convs.len().saturating_sub(1)
    }

    pub fn out_dim(&self) -> usize {
        self.gru.cell.hidden
    }

    /// `mel: [T, n_mels]` to a `[1, hidden]` summary.
    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, mel: Var) -> Result<Var, NetError> {
        let shape = s.graph.shape(mel).to_vec();
        if shape.len() != 2 || shape[1] != self.n_mels {
            return Err(NetError::input(&self.name, format!("expected [T, {}] mel, got {:?}", self.n_mels, shape)));
        }
        if shape[0] < self.min_frames() {
            return Err(NetError::input(&self.name, format!("{} frames is too short, need at least {}", shape[0], self.min_frames())));
        }
        let mut x = s.graph.reshape(mel, &[1, 1, shape[0], shape[1]])?;
        for conv in &self.convs {
            x = conv.forward(s, x)?;
            x = s.graph.relu(x)?;
        }
        let dims = s.graph.shape(x).to_vec();
        let (c, t_out, w) = (dims[1], dims[2], dims[3]);
        let mut steps = Vec::with_capacity(t_out);
        for t in 0..t_out {
            let frame = s.graph.slice(x, 2, t, 1)?;
            steps.push(s.graph.reshape(frame, &[1, c * w])?);
        }
        let seq = s.graph.concat(&steps, 0)?;
        let states = self.gru.run(s, seq, false)?;
        Ok(*states.last().expect("at least one step"))
    }
}

/// Multi-head attention of a query over a learned token bank.
#[derive(Clone, Debug)]
pub struct StyleTokenBank {
    pub name: String,
    /// `[K, emb_dim / heads]`
    pub tokens: ParamId,
    /// `[emb_dim, query_dim]`
    pub w_query: ParamId,
    /// `[emb_dim, token_dim]`
    pub w_key: ParamId,
    /// `[emb_dim, token_dim]`
    pub w_value: ParamId,
    pub n_tokens: usize,
    pub heads: usize,
    pub emb_dim: usize,
    pub query_dim: usize,
    pub tanh_tokens: bool,
}

/// Output of [`StyleTokenBank::forward`]: the `[N, emb_dim]` embedding and
/// the `[N, K]` attention weights of every head.
pub struct StyleAttention {
    pub embedding: Var,
    pub weights: Vec<Var>,
}

impl StyleTokenBank {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, cfg: &GstConfig, query_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        if cfg.tokens == 0 {
            return Err(NetError::input(name, "token bank needs at least one token"));
        }
        if cfg.heads == 0 || cfg.emb_dim % cfg.heads != 0 {
            return Err(NetError::input(name, format!("embedding dim {} not divisible by {} heads", cfg.emb_dim, cfg.heads)));
        }
        let d_tok = cfg.emb_dim / cfg.heads;
        Ok(StyleTokenBank {
            name: name.to_string(),
            tokens: store.add(format!("{name}.tokens"), uniform(rng, &[cfg.tokens, d_tok], 0.5), true)?,
            w_query: store.add(format!("{name}.w_query"), uniform(rng, &[cfg.emb_dim, query_dim], xavier_bound(query_dim, cfg.emb_dim)), true)?,
            w_key: store.add(format!("{name}.w_key"), uniform(rng, &[cfg.emb_dim, d_tok], xavier_bound(d_tok, cfg.emb_dim)), true)?,
            w_value: store.add(format!("{name}.w_value"), uniform(rng, &[cfg.emb_dim, d_tok], xavier_bound(d_tok, cfg.emb_dim)), true)?,
            n_tokens: cfg.tokens,
            heads: cfg.heads,
            emb_dim: cfg.emb_dim,
            query_dim,
            tanh_tokens: cfg.tanh_tokens,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.heads
    }

    /// Token value projections `[K, emb_dim]`; head `h` owns columns
    /// `h*head_dim .. (h+1)*head_dim`.
    pub fn values<F: Element>(&self, s: &mut Session<'_, F>) -> Result<Var, NetError> {
        let tokens = self.token_inputs(s)?;
        let wv = s.param(self.w_value);
        Ok(s.graph.matmul_nt(tokens, wv)?)
    }

    fn token_inputs<F: Element>(&self, s: &mut Session<'_, F>) -> Result<Var, NetError> {
        let t = s.param(self.tokens);
        Ok(if self.tanh_tokens { s.graph.tanh(t)? } else { t })
    }

    /// `query: [N, query_dim]`.
    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, query: Var) -> Result<StyleAttention, NetError> {
        let shape = s.graph.shape(query);
        if shape.len() != 2 || shape[1] != self.query_dim {
            return Err(NetError::input(&self.name, format!("expected [N, {}] query, got {:?}", self.query_dim, shape)));
        }
        let tokens = self.token_inputs(s)?;
        let (wq, wk, wv) = (s.param(self.w_query), s.param(self.w_key), s.param(self.w_value));
        let g = &mut s.graph;
        let q = g.matmul_nt(query, wq)?;
        let k = g.matmul_nt(tokens, wk)?;
        let v = g.matmul_nt(tokens, wv)?;
        let d = self.head_dim();
        let scale = F::of(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * d, d)?;
            let kh = g.slice(k, 1, h * d, d)?;
            let vh = g.slice(v, 1, h * d, d)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let alpha = g.softmax(scores, 1)?;
            outs.push(g.matmul(alpha, vh)?);
            weights.push(alpha);
        }
        let embedding = g.concat(&outs, 1)?;
        Ok(StyleAttention { embedding, weights })
    }
}

/// Reference encoder followed by style-token attention: a mel to a
/// fixed-size style embedding.
#[derive(Clone, Debug)]
pub struct GstEncoder {
    pub reference: ReferenceEncoder,
    pub bank: StyleTokenBank,
}

impl GstEncoder {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, cfg: &GstConfig, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let reference = ReferenceEncoder::new(store, &format!("{name}.ref"), cfg, rng)?;
        let bank = StyleTokenBank::new(store, &format!("{name}.gst"), cfg, reference.out_dim(), rng)?;
        Ok(GstEncoder { reference, bank })
    }

    pub fn emb_dim(&self) -> usize {
        self.bank.emb_dim
    }

    /// `mel: [T, n_mels]` to a `[1, emb_dim]` embedding.
    pub fn embed<F: Element>(&self, s: &mut Session<'_, F>, mel: Var) -> Result<Var, NetError> {
        let summary = self.reference.forward(s, mel)?;
        Ok(self.bank.forward(s, summary)?.embedding)
    }
}
