use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Mode, Tensor, Var};
use crate::config::Config;
use crate::model::{mel_tensor, DecodeMode, Model, Task, Vocab};
use crate::nets::{NetError, ParamId, ParamStore, Session};

use super::checkpoint::save_checkpoint;
use super::data::{order_swap_sample, Batch, Batcher, Dataset};
use super::{LossBreakdown, TrainConfig, TrainError};

/// Adam moments, one pair per trainable parameter (empty for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |id: ParamId| if params.is_trainable(id) { Tensor::zeros(params.get(id).shape()) } else { Tensor::zeros(&[0]) };
        let m: Vec<_> = params.ids().into_iter().map(zeros).collect();
        Adam { v: m.clone(), m }
    }

    /// One update with step count `t` (1-based). Weight decay is added to
    /// the gradient; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], cfg: &TrainConfig, t: u64) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        for (id, g) in grads {
            let p = params.get_mut(*id).data_mut();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g as f64 + cfg.weight_decay * *p as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                *p = (*p as f64 - cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps)) as f32;
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Loss terms as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mel_mse: Var,
    pub stop_bce: Var,
    pub task_loss: Var,
    pub total: Var,
}

fn sum_all(s: &mut Session<'_, f32>, terms: &[Var]) -> Result<Var, NetError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = s.graph.add(acc, t)?;
    }
    Ok(acc)
}

/// `mean(softplus(z) − y·z)`, the logistic loss of logits `z` against labels
/// `y`.
pub(crate) fn bce_with_logits(s: &mut Session<'_, f32>, z: Var, y: Var) -> Result<Var, NetError> {
    let g = &mut s.graph;
    let sp = g.softplus(z)?;
    let yz = g.mul(y, z)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean(l)?)
}

/// Teacher-forced forward of `batch` and the variant's loss.
///
/// `mel_mse` and `stop_bce` average over every real frame of the batch (the
/// decoder runs each utterance at its own length, so there is no padding to
/// mask). The stop target is 1 only at each utterance's last frame.
pub fn compute_loss(model: &Model, s: &mut Session<'_, f32>, data: &Dataset, batch: &Batch, task_weight: f64) -> Result<LossVars, TrainError> {
    if batch.pairs.is_empty() {
        return Err(TrainError::Data("empty batch".into()));
    }
    let n_mels = model.cfg.n_mels;
    let task = model.variant.task();
    let (mut sq, mut bce, mut ace, mut ae) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut frames = 0usize;
    for (&p, &c) in batch.pairs.iter().zip(&batch.contexts) {
        let curr = &data.utterances[data.pairs[p].1];
        let enc = model.encode_text(s, &curr.text)?;
        let ctx_mel = if model.variant.uses_context() { Some(s.constant(mel_tensor(&data.utterances[c].mel))) } else { None };
        let ctx = model.context(s, ctx_mel)?;
        let target = s.constant(mel_tensor(&curr.mel));
        let out = model.decode(s, enc, ctx, Some(target), DecodeMode::TeacherForced, 0)?;
        let t = curr.mel.n_frames;
        frames += t;
        let g = &mut s.graph;
        let d = g.sub(out.mel, target).map_err(NetError::from)?;
        let d2 = g.mul(d, d).map_err(NetError::from)?;
        sq.push(g.sum(d2).map_err(NetError::from)?);
        let mut labels = vec![0.0f32; t];
        labels[t - 1] = 1.0;
        let y = s.constant(Tensor::new(vec![t, 1], labels).map_err(NetError::from)?);
        let sp = s.graph.softplus(out.stop).map_err(NetError::from)?;
        let yz = s.graph.mul(y, out.stop).map_err(NetError::from)?;
        let l = s.graph.sub(sp, yz).map_err(NetError::from)?;
        bce.push(s.graph.sum(l).map_err(NetError::from)?);
        if task.is_some() {
            ace.push(ctx);
            ae.push(model.ae_embed(s, target)?);
        }
    }
    let sq_total = sum_all(s, &sq)?;
    let mel_mse = s.graph.scale(sq_total, 1.0 / (frames * n_mels) as f32).map_err(NetError::from)?;
    let bce_total = sum_all(s, &bce)?;
    let stop_bce = s.graph.scale(bce_total, 1.0 / frames as f32).map_err(NetError::from)?;
    let task_loss = match task {
        None => s.constant(Tensor::scalar(0.0)),
        Some(Task::Next) => {
            let prev = s.graph.concat(&ace, 0).map_err(NetError::from)?;
            let target = s.graph.concat(&ae, 0).map_err(NetError::from)?;
            let pred = model.next_predict(s, prev)?;
            let g = &mut s.graph;
            let d = g.sub(pred, target).map_err(NetError::from)?;
            let d2 = g.mul(d, d).map_err(NetError::from)?;
            g.mean(d2).map_err(NetError::from)?
        }
        Some(Task::Order) => {
            let (mut a, mut b, mut labels) = (Vec::new(), Vec::new(), Vec::new());
            for (i, &swap) in batch.swaps.iter().enumerate() {
                let (x, y) = if swap { (ae[i], ace[i]) } else { (ace[i], ae[i]) };
                a.push(x);
                b.push(y);
                labels.push(if swap { 0.0 } else { 1.0 });
            }
            let ea = s.graph.concat(&a, 0).map_err(NetError::from)?;
            let eb = s.graph.concat(&b, 0).map_err(NetError::from)?;
            let z = model.order_logit(s, ea, eb)?;
            let y = s.constant(Tensor::new(vec![labels.len(), 1], labels).map_err(NetError::from)?);
            bce_with_logits(s, z, y)?
        }
    };
    let g = &mut s.graph;
    let tts = g.add(mel_mse, stop_bce).map_err(NetError::from)?;
    let weighted = g.scale(task_loss, task_weight as f32).map_err(NetError::from)?;
    let total = g.add(tts, weighted).map_err(NetError::from)?;
    Ok(LossVars { mel_mse, stop_bce, task_loss, total })
}

fn breakdown(s: &Session<'_, f32>, v: &LossVars) -> Result<LossBreakdown, TrainError> {
    let val = |x: Var| s.graph.value(x).item();
    let b = LossBreakdown { mel_mse: val(v.mel_mse), stop_bce: val(v.stop_bce), task_loss: val(v.task_loss), total: val(v.total) };
    b.check_finite()?;
    Ok(b)
}

/// Model, parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Updates applied so far.
    pub iteration: u64,
}

impl TrainState {
    /// Fresh model initialized from `config.train.seed`.
    pub fn new(config: Config, vocab: Vocab) -> Result<Self, TrainError> {
        config.train.validate()?;
        let (model, params) = Model::new::<f32>(config.model.clone(), vocab, config.train.variant, config.train.seed)?;
        let adam = Adam::new(&params);
        Ok(TrainState { config, model, params, adam, iteration: 0 })
    }
}

/// Loss of `batch` at the current parameters without updating anything.
pub fn evaluate(state: &TrainState, data: &Dataset, batch: &Batch, mode: Mode) -> Result<LossBreakdown, TrainError> {
    let mut s = Session::new(&state.params, mode, batch.seed);
    let vars = compute_loss(&state.model, &mut s, data, batch, state.config.train.task_weight)?;
    breakdown(&s, &vars)
}

/// Forward, backward, clipping, one Adam update and the batch-norm running
/// statistics; returns the loss before the update.
pub fn train_step(state: &mut TrainState, data: &Dataset, batch: &Batch) -> Result<LossBreakdown, TrainError> {
    let cfg = state.config.train.clone();
    let (loss, mut grads, stats) = {
        let mut s = Session::new(&state.params, Mode::Train, batch.seed);
        let vars = compute_loss(&state.model, &mut s, data, batch, cfg.task_weight)?;
        let loss = breakdown(&s, &vars)?;
        let g = s.graph.backward(vars.total).map_err(NetError::from)?;
        let grads: Vec<(ParamId, Tensor<f32>)> =
            s.bound().into_iter().filter(|&(id, v)| state.params.is_trainable(id) && g.reached(v)).map(|(id, v)| (id, g.get(v))).collect();
        (loss, grads, s.take_stat_updates())
    };
    clip_global_norm(&mut grads, cfg.grad_clip);
    state.adam.update(&mut state.params, &grads, &cfg, state.iteration + 1);
    for (id, t) in stats {
        *state.params.get_mut(id) = t;
    }
    state.iteration += 1;
    Ok(loss)
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub split: String,
    pub mel_mse: f64,
    pub stop_bce: f64,
    pub task_loss: f64,
    pub total: f64,
    pub lr: f64,
}

impl MetricsRecord {
    fn new(iter: u64, split: &str, b: &LossBreakdown, lr: f64) -> Self {
        MetricsRecord {
            iter,
            split: split.to_string(),
            mel_mse: b.mel_mse as f64,
            stop_bce: b.stop_bce as f64,
            task_loss: b.task_loss as f64,
            total: b.total as f64,
            lr,
        }
    }
}

fn validation_loss(state: &TrainState, val: &Dataset, batcher: &Batcher, iteration: u64) -> Result<LossBreakdown, TrainError> {
    let (mut acc, mut n) = ([0.0f64; 3], 0usize);
    for batch in batcher.eval_batches(iteration) {
        let b = evaluate(state, val, &batch, Mode::Eval)?;
        let k = batch.pairs.len();
        for (a, v) in acc.iter_mut().zip([b.mel_mse, b.stop_bce, b.task_loss]) {
            *a += v as f64 * k as f64;
        }
        n += k;
    }
    let m = |i: usize| (acc[i] / n as f64) as f32;
    Ok(LossBreakdown::compose(m(0), m(1), m(2), state.config.train.task_weight))
}

fn emit(metrics: &mut dyn Write, rec: &MetricsRecord) -> Result<(), TrainError> {
    let line = serde_json::to_string(rec).expect("metrics serialize");
    writeln!(metrics, "{line}").map_err(|e| TrainError::io(Path::new("<metrics>"), e))
}

/// Trains from `state.iteration` up to `max_iters`.
///
/// Every `log_every` iterations (starting at 0, up to and including
/// `max_iters`) a `train` line records the loss of that iteration's batch
/// at the parameters before its update; at `max_iters` the batch is only
/// evaluated. With a validation set, a `val` line follows each train line,
/// computed in eval mode (batch norm frozen, head dropout off, prenet
/// dropout on). Checkpoints go to `checkpoint_dir` every `checkpoint_every`
/// updates and at the end.
pub fn run_training(
    state: &mut TrainState,
    train: &Dataset,
    val: Option<&Dataset>,
    metrics: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<(Vec<MetricsRecord>, Vec<PathBuf>), TrainError> {
    let cfg = state.config.train.clone();
    let mut batcher = Batcher::new(train, &cfg)?;
    let val_batcher = match val {
        Some(v) if !v.is_empty() => Some((v, Batcher::new(v, &cfg)?)),
        _ => None,
    };
    let (mut records, mut checkpoints) = (Vec::new(), Vec::new());
    let save = |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<(), TrainError> {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("checkpoint_{:08}.ckpt", state.iteration));
            save_checkpoint(state, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    let mut last_saved = None;
    while state.iteration <= cfg.max_iters {
        let it = state.iteration;
        let logged = it % cfg.log_every == 0;
        let val_loss = match &val_batcher {
            Some((v, vb)) if logged => Some(validation_loss(state, v, vb, it)?),
            _ => None,
        };
        let batch = batcher.batch(it);
        let loss = if it < cfg.max_iters { train_step(state, train, &batch)? } else { evaluate(state, train, &batch, Mode::Train)? };
        if logged {
            for (split, l) in [("train", Some(loss)), ("val", val_loss)] {
                if let Some(l) = l {
                    let rec = MetricsRecord::new(it, split, &l, cfg.lr);
                    emit(metrics, &rec)?;
                    records.push(rec);
                }
            }
        }
        if it == cfg.max_iters {
            break;
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            save(state, &mut checkpoints)?;
            last_saved = Some(state.iteration);
        }
    }
    if last_saved != Some(state.iteration) {
        save(state, &mut checkpoints)?;
    }
    Ok((records, checkpoints))
}

/// Order-task accuracy over every pair of `data`, each presented in a
/// seeded random order, in eval mode. Returns `(correct, total)`.
pub fn order_accuracy(state: &TrainState, data: &Dataset, seed: u64) -> Result<(usize, usize), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Session::new(&state.params, Mode::Eval, seed);
    let (mut a, mut b, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for &(prev, curr) in &data.pairs {
        let pm = s.constant(mel_tensor(&data.utterances[prev].mel));
        let cm = s.constant(mel_tensor(&data.utterances[curr].mel));
        let e_prev = state.model.ace_embed(&mut s, pm)?;
        let e_curr = state.model.ae_embed(&mut s, cm)?;
        let sample = order_swap_sample(e_prev, e_curr, state.config.train.swap_prob, &mut rng);
        a.push(sample.a);
        b.push(sample.b);
        labels.push(sample.label);
    }
    if labels.is_empty() {
        return Err(TrainError::Data("no pairs to classify".into()));
    }
    let ea = s.graph.concat(&a, 0).map_err(NetError::from)?;
    let eb = s.graph.concat(&b, 0).map_err(NetError::from)?;
    let z = state.model.order_logit(&mut s, ea, eb)?;
    let correct = s.graph.value(z).data().iter().zip(&labels).filter(|(&z, &l)| (z > 0.0) == (l == 1)).count();
    Ok((correct, labels.len()))
}
