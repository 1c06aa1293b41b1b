use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, Tensor, Var};
use crate::nets::{uniform_param, GruCell, Linear, NetError, ParamId, ParamStore, Session};

/// Two ReLU layers, each followed by dropout that stays on at inference.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Prenet {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, n_mels: usize, dims: &[usize], dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let mut layers = Vec::with_capacity(dims.len());
        let mut d_in = n_mels;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.fc{}", i + 1), d_in, d, rng)?);
            d_in = d;
        }
        Ok(Prenet { layers, dropout })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
            h = s.graph.relu(h)?;
            h = s.dropout_always(h, self.dropout)?;
        }
        Ok(h)
    }
}

/// Additive attention: `e_j = vᵀ tanh(W_m m_j + b + W_q q)`, weights
/// `softmax(e)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_query: ParamId,
    pub memory_proj: Linear,
    pub v: ParamId,
    pub query_dim: usize,
    pub attn_dim: usize,
}

/// Memory with its projection cached for every decoder step.
pub struct AttentionMemory {
    pub memory: Var,
    pub keys: Var,
}

impl Attention {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, query_dim: usize, memory_dim: usize, attn_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        Ok(Attention {
            w_query: uniform_param(store, &format!("{name}.w_query"), &[attn_dim, query_dim], rng)?,
            memory_proj: Linear::new(store, &format!("{name}.memory"), memory_dim, attn_dim, rng)?,
            v: uniform_param(store, &format!("{name}.v"), &[1, attn_dim], rng)?,
            query_dim,
            attn_dim,
        })
    }

    /// `memory: [L, D]`.
    pub fn prepare<F: Element>(&self, s: &mut Session<'_, F>, memory: Var) -> Result<AttentionMemory, NetError> {
        let keys = self.memory_proj.forward(s, memory)?;
        Ok(AttentionMemory { memory, keys })
    }

    /// Context `[1, D]` and weights `[1, L]` for `query: [1, query_dim]`.
    pub fn attend<F: Element>(&self, s: &mut Session<'_, F>, mem: &AttentionMemory, query: Var) -> Result<(Var, Var), NetError> {
        let wq = s.param(self.w_query);
        let v = s.param(self.v);
        let g = &mut s.graph;
        let pq = g.matmul_nt(query, wq)?;
        let e = g.add(mem.keys, pq)?;
        let e = g.tanh(e)?;
        let energies = g.matmul_nt(v, e)?;
        let alpha = g.softmax(energies, 1)?;
        let ctx = g.matmul(alpha, mem.memory)?;
        Ok((ctx, alpha))
    }
}

/// Whether frames come from the target (teacher forcing) or from the
/// decoder's own previous prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    TeacherForced,
    FreeRunning,
}

/// Fixed affine standardization of log-mel values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelNorm {
    pub mean: f64,
    pub std: f64,
}

impl MelNorm {
    /// `(mel − mean) / std`
    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, mel: Var) -> Result<Var, NetError> {
        let g = &mut s.graph;
        let centered = g.add_scalar(mel, F::of(-self.mean))?;
        Ok(g.scale(centered, F::of(1.0 / self.std))?)
    }

    /// `z · std + mean`
    pub fn inverse<F: Element>(&self, s: &mut Session<'_, F>, z: Var) -> Result<Var, NetError> {
        let g = &mut s.graph;
        let scaled = g.scale(z, F::of(self.std))?;
        Ok(g.add_scalar(scaled, F::of(self.mean))?)
    }
}

/// Autoregressive mel decoder with one GRU layer and linear output heads.
/// The prenet reads and the mel head writes standardized frames; `run`
/// takes and returns log-mels.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub prenet: Prenet,
    pub attention: Attention,
    pub rnn: GruCell,
    pub mel_out: Linear,
    pub stop_out: Linear,
    pub n_mels: usize,
    /// Width of the style embedding fed at every step; 0 when the context
    /// joins the encoder outputs instead.
    pub context_dim: usize,
    pub memory_dim: usize,
    pub norm: MelNorm,
}

/// Decoder outputs as graph variables.
pub struct DecodeVars {
    /// `[T, n_mels]`
    pub mel: Var,
    /// `[T, 1]`
    pub stop: Var,
    /// One `[1, L]` row per step.
    pub alignment: Vec<Var>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        n_mels: usize,
        prenet_dims: &[usize],
        prenet_dropout: f64,
        context_dim: usize,
        memory_dim: usize,
        hidden: usize,
        attn_dim: usize,
        norm: MelNorm,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        let prenet = Prenet::new(store, &format!("{name}.prenet"), n_mels, prenet_dims, prenet_dropout, rng)?;
        let attention = Attention::new(store, &format!("{name}.attention"), hidden, memory_dim, attn_dim, rng)?;
        let rnn = GruCell::new(store, &format!("{name}.gru"), prenet.out_dim() + context_dim + memory_dim, hidden, rng)?;
        let mel_out = Linear::new(store, &format!("{name}.mel_out"), hidden + memory_dim, n_mels, rng)?;
        let stop_out = Linear::new(store, &format!("{name}.stop_out"), hidden + memory_dim, 1, rng)?;
        Ok(Decoder { prenet, attention, rnn, mel_out, stop_out, n_mels, context_dim, memory_dim, norm })
    }

    /// Runs the decoder over `memory: [L, memory_dim]`. `context: [1,
    /// context_dim]` is required when `context_dim > 0`.
    pub fn run<F: Element>(
        &self,
        s: &mut Session<'_, F>,
        memory: Var,
        context: Option<Var>,
        target: Option<Var>,
        mode: DecodeMode,
        max_frames: usize,
    ) -> Result<DecodeVars, NetError> {
        let steps = match (mode, target) {
            (DecodeMode::TeacherForced, Some(t)) => {
                let shape = s.graph.shape(t);
                if shape.len() != 2 || shape[1] != self.n_mels || shape[0] == 0 {
                    return Err(NetError::input("decoder", format!("target must be [T, {}] with T > 0, got {:?}", self.n_mels, shape)));
                }
                shape[0]
            }
            (DecodeMode::TeacherForced, None) => return Err(NetError::input("decoder", "teacher forcing needs a target mel")),
            (DecodeMode::FreeRunning, _) => {
                if max_frames < 1 {
                    return Err(NetError::input("decoder", "max_frames must be at least 1"));
                }
                max_frames
            }
        };
        if self.context_dim > 0 && context.is_none() {
            return Err(NetError::input("decoder", "missing context embedding"));
        }
        let mem = self.attention.prepare(s, memory)?;
        let mut h = self.rnn.zero_state(s, 1);
        let mut prev = s.constant(Tensor::zeros(&[1, self.n_mels]));
        let (mut mels, mut stops, mut alignment) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..steps {
            let p = self.prenet.forward(s, prev)?;
            let (ctx, alpha) = self.attention.attend(s, &mem, h)?;
            let mut parts = vec![p];
            parts.extend(context.filter(|_| self.context_dim > 0));
            parts.push(ctx);
            let x = s.graph.concat(&parts, 1)?;
            h = self.rnn.step(s, x, h)?;
            let out = s.graph.concat(&[h, ctx], 1)?;
            let z = self.mel_out.forward(s, out)?;
            let mel = self.norm.inverse(s, z)?;
            let stop = self.stop_out.forward(s, out)?;
            mels.push(mel);
            stops.push(stop);
            alignment.push(alpha);
            match (mode, target) {
                (DecodeMode::TeacherForced, Some(tgt)) => {
                    if t + 1 < steps {
                        let frame = s.graph.slice(tgt, 0, t, 1)?;
                        prev = self.norm.forward(s, frame)?;
                    }
                }
                _ => {
                    if s.graph.value(stop).item().f64() > 0.0 {
                        break;
                    }
                    prev = z;
                }
            }
        }
        let mel = s.graph.concat(&mels, 0)?;
        let stop = s.graph.concat(&stops, 0)?;
        Ok(DecodeVars { mel, stop, alignment })
    }
}
