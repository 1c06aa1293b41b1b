//! The context-conditioned synthesis model: character encoder, attention
//! decoder, acoustic context encoder (ACE), acoustic encoder (AE) and the
//! two auxiliary task heads.

mod decoder;
mod heads;
mod vocab;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Element, Mode, Tensor, Var};
use crate::dsp::{griffin_lim, DspError, MelConfig, MelSpectrogram, Waveform};
use crate::nets::{uniform_param, GstConfig, GstEncoder, Gru, NetError, ParamId, ParamStore, Session};

pub use decoder::{Attention, AttentionMemory, DecodeMode, DecodeVars, Decoder, MelNorm, Prenet};
pub use heads::{MlpHead, NextHead, OrderHead, NEXT_DIMS, ORDER_DIMS};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("empty text")]
    EmptyText,
    #[error("unknown characters: {0}")]
    UnknownChars(String),
    #[error("{0} needs a context mel")]
    MissingContext(Variant),
    #[error("model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    AceOnly,
    OrderTask,
    NextTask,
    /// Next-task architecture trained with contexts drawn from unrelated
    /// utterances.
    RandomContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Order,
    Next,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::AceOnly, Variant::OrderTask, Variant::NextTask, Variant::RandomContext];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::AceOnly => "ace_only",
            Variant::OrderTask => "order_task",
            Variant::NextTask => "next_task",
            Variant::RandomContext => "random_context",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Variant::Baseline
    }

    pub fn task(self) -> Option<Task> {
        match self {
            Variant::Baseline | Variant::AceOnly => None,
            Variant::OrderTask => Some(Task::Order),
            Variant::NextTask | Variant::RandomContext => Some(Task::Next),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm || v.name().trim_end_matches("_task") == norm)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

/// Where the style embedding enters the synthesis network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextPoint {
    /// Concatenated to the decoder input at every step.
    DecoderInput,
    /// Broadcast-concatenated to every encoder output.
    EncoderOutputs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub char_emb: usize,
    /// Per direction.
    pub enc_hidden: usize,
    pub prenet: Vec<usize>,
    pub prenet_dropout: f64,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub gst: GstConfig,
    pub head_dropout: f64,
    pub context_point: ContextPoint,
    pub max_frames: usize,
    /// Log-mel standardization applied wherever a mel enters a network and
    /// inverted on the decoder's output.
    pub mel_norm: MelNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            char_emb: 64,
            enc_hidden: 128,
            prenet: vec![256, 128],
            prenet_dropout: 0.5,
            dec_hidden: 512,
            attn_dim: 128,
            gst: GstConfig::default(),
            head_dropout: 0.5,
            context_point: ContextPoint::DecoderInput,
            max_frames: 1000,
            mel_norm: MelNorm { mean: -6.0, std: 3.0 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let emb = NEXT_DIMS[0][0];
        if self.gst.emb_dim != emb || ORDER_DIMS[0][0] != 2 * emb {
            return Err(ModelError::Config(format!("style embedding must be {emb}-d to feed the task heads, got {}", self.gst.emb_dim)));
        }
        if self.gst.n_mels != self.n_mels {
            return Err(ModelError::Config(format!("encoder expects {} mels but the model uses {}", self.gst.n_mels, self.n_mels)));
        }
        if self.prenet.is_empty() || [self.char_emb, self.enc_hidden, self.dec_hidden, self.attn_dim, self.n_mels].contains(&0) {
            return Err(ModelError::Config("layer sizes must be positive".into()));
        }
        for p in [self.prenet_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if !(self.mel_norm.std > 0.0) || !self.mel_norm.mean.is_finite() || !self.mel_norm.std.is_finite() {
            return Err(ModelError::Config("mel standardization needs a finite mean and a positive std".into()));
        }
        if self.max_frames < 1 {
            return Err(ModelError::Config("max_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameter groups, keyed by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TextEncoder,
    Decoder,
    Ace,
    Ae,
    OrderHead,
    NextHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [ParamGroup::TextEncoder, ParamGroup::Decoder, ParamGroup::Ace, ParamGroup::Ae, ParamGroup::OrderHead, ParamGroup::NextHead];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text.",
            ParamGroup::Decoder => "decoder.",
            ParamGroup::Ace => "ace.",
            ParamGroup::Ae => "ae.",
            ParamGroup::OrderHead => "order.",
            ParamGroup::NextHead => "next.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub variant: Variant,
    pub embedding: ParamId,
    pub enc_fwd: Gru,
    pub enc_bwd: Gru,
    pub ace: GstEncoder,
    pub ae: GstEncoder,
    pub decoder: Decoder,
    pub order: OrderHead,
    pub next: NextHead,
}

impl Model {
    /// Builds the architecture and a freshly initialized parameter store.
    /// Every component exists for every variant, so checkpoints share one
    /// layout.
    pub fn new<F: Element>(cfg: ModelConfig, vocab: Vocab, variant: Variant, seed: u64) -> Result<(Model, ParamStore<F>), ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = uniform_param(&mut store, "text.embedding", &[vocab.len(), cfg.char_emb], &mut rng)?;
        let enc_fwd = Gru::new(&mut store, "text.gru_fwd", cfg.char_emb, cfg.enc_hidden, &mut rng)?;
        let enc_bwd = Gru::new(&mut store, "text.gru_bwd", cfg.char_emb, cfg.enc_hidden, &mut rng)?;
        let ace = GstEncoder::new(&mut store, "ace", &cfg.gst, &mut rng)?;
        let ae = GstEncoder::new(&mut store, "ae", &cfg.gst, &mut rng)?;
        let emb = cfg.gst.emb_dim;
        let (context_dim, memory_dim) = match cfg.context_point {
            ContextPoint::DecoderInput => (emb, 2 * cfg.enc_hidden),
            ContextPoint::EncoderOutputs => (0, 2 * cfg.enc_hidden + emb),
        };
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            cfg.n_mels,
            &cfg.prenet,
            cfg.prenet_dropout,
            context_dim,
            memory_dim,
            cfg.dec_hidden,
            cfg.attn_dim,
            cfg.mel_norm,
            &mut rng,
        )?;
        let order = OrderHead::new(&mut store, "order", cfg.head_dropout, &mut rng)?;
        let next = NextHead::new(&mut store, "next", cfg.head_dropout, &mut rng)?;
        let model = Model { cfg, vocab, variant, embedding, enc_fwd, enc_bwd, ace, ae, decoder, order, next };
        Ok((model, store))
    }

    pub fn emb_dim(&self) -> usize {
        self.cfg.gst.emb_dim
    }

    /// Character embeddings through a bidirectional GRU: `[L, 2·enc_hidden]`.
    pub fn encode_text<F: Element>(&self, s: &mut Session<'_, F>, text: &str) -> Result<Var, ModelError> {
        let ids = self.vocab.encode(text)?;
        let table = s.param(self.embedding);
        let x = s.graph.embedding(table, &ids).map_err(NetError::from)?;
        let fwd = self.enc_fwd.run(s, x, false)?;
        let bwd = self.enc_bwd.run(s, x, true)?;
        let g = &mut s.graph;
        let f = g.concat(&fwd, 0).map_err(NetError::from)?;
        let b = g.concat(&bwd, 0).map_err(NetError::from)?;
        Ok(g.concat(&[f, b], 1).map_err(NetError::from)?)
    }

    /// Style embedding `[1, 256]` of a context (utterance N−1) mel.
    pub fn ace_embed<F: Element>(&self, s: &mut Session<'_, F>, mel: Var) -> Result<Var, ModelError> {
        let x = self.cfg.mel_norm.forward(s, mel)?;
        Ok(self.ace.embed(s, x)?)
    }

    /// Style embedding `[1, 256]` of the current utterance's mel; training
    /// only.
    pub fn ae_embed<F: Element>(&self, s: &mut Session<'_, F>, mel: Var) -> Result<Var, ModelError> {
        let x = self.cfg.mel_norm.forward(s, mel)?;
        Ok(self.ae.embed(s, x)?)
    }

    /// The conditioning vector: the ACE embedding, or zeros for the
    /// baseline (which never looks at `context_mel`).
    pub fn context<F: Element>(&self, s: &mut Session<'_, F>, context_mel: Option<Var>) -> Result<Var, ModelError> {
        if !self.variant.uses_context() {
            return Ok(s.constant(Tensor::zeros(&[1, self.emb_dim()])));
        }
        let mel = context_mel.ok_or(ModelError::MissingContext(self.variant))?;
        self.ace_embed(s, mel)
    }

    pub fn decode<F: Element>(
        &self,
        s: &mut Session<'_, F>,
        enc: Var,
        context: Var,
        target: Option<Var>,
        mode: DecodeMode,
        max_frames: usize,
    ) -> Result<DecodeVars, ModelError> {
        let (memory, step_context) = match self.cfg.context_point {
            ContextPoint::DecoderInput => (enc, Some(context)),
            ContextPoint::EncoderOutputs => {
                let len = s.graph.shape(enc)[0];
                let ones = s.constant(Tensor::full(&[len, 1], F::one()));
                let g = &mut s.graph;
                let tiled = g.matmul(ones, context).map_err(NetError::from)?;
                (g.concat(&[enc, tiled], 1).map_err(NetError::from)?, None)
            }
        };
        Ok(self.decoder.run(s, memory, step_context, target, mode, max_frames)?)
    }

    pub fn order_logit<F: Element>(&self, s: &mut Session<'_, F>, e_a: Var, e_b: Var) -> Result<Var, ModelError> {
        Ok(self.order.forward(s, e_a, e_b)?)
    }

    pub fn next_predict<F: Element>(&self, s: &mut Session<'_, F>, e_prev: Var) -> Result<Var, ModelError> {
        Ok(self.next.forward(s, e_prev)?)
    }
}

pub fn mel_tensor<F: Element>(m: &MelSpectrogram) -> Tensor<F> {
    Tensor::new(vec![m.n_frames, m.n_mels], m.data.iter().map(|&v| F::of(v as f64)).collect()).expect("mel data matches its frame count")
}

pub fn tensor_mel<F: Element>(t: &Tensor<F>, cfg: &MelConfig) -> MelSpectrogram {
    let data = t.data().iter().map(|v| v.f64() as f32).collect();
    MelSpectrogram::new(data, t.shape()[0], t.shape()[1], cfg.hop, cfg.sample_rate)
}

#[derive(Clone, Debug)]
pub struct SynthesisRequest<'a> {
    pub text: &'a str,
    pub context: Option<&'a MelSpectrogram>,
    /// Seeds the prenet dropout.
    pub seed: u64,
    pub max_frames: usize,
    /// Griffin-Lim iterations; 0 skips waveform reconstruction.
    pub griffin_lim_iters: usize,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub stop_logits: Vec<f32>,
    /// Attention weights, one row per output frame.
    pub alignment: Vec<Vec<f32>>,
    pub waveform: Option<Waveform>,
    /// Names of every parameter the pass read.
    pub params_used: Vec<String>,
}

/// Free-running inference in eval mode. Only the ACE reads the context
/// mel; the AE is never evaluated.
pub fn synthesize(model: &Model, params: &ParamStore<f32>, mel_cfg: &MelConfig, req: &SynthesisRequest<'_>) -> Result<Synthesis, ModelError> {
    let mut s = Session::new(params, Mode::Eval, req.seed);
    let enc = model.encode_text(&mut s, req.text)?;
    let context_mel = match req.context {
        Some(m) if model.variant.uses_context() => Some(s.constant(mel_tensor(m))),
        _ => None,
    };
    let context = model.context(&mut s, context_mel)?;
    let out = model.decode(&mut s, enc, context, None, DecodeMode::FreeRunning, req.max_frames)?;
    let params_used: Vec<String> = s.bound_names().into_iter().map(str::to_string).collect();
    assert!(
        params_used.iter().all(|n| ParamGroup::of(n) != Some(ParamGroup::Ae)),
        "synthesis evaluated the acoustic encoder"
    );
    let mel = tensor_mel(s.graph.value(out.mel), mel_cfg);
    let stop_logits = s.graph.value(out.stop).data().to_vec();
    let alignment = out.alignment.iter().map(|&a| s.graph.value(a).data().to_vec()).collect();
    let waveform = if req.griffin_lim_iters > 0 { Some(griffin_lim(&mel, mel_cfg, req.griffin_lim_iters)?) } else { None };
    Ok(Synthesis { mel, stop_logits, alignment, waveform, params_used })
}

#[cfg(test)]
mod tests;
