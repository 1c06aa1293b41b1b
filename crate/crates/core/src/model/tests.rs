use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::{check_gradients, check_gradients_against, GradCheck};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        char_emb: 8,
        enc_hidden: 16,
        prenet: vec![32, 16],
        dec_hidden: 32,
        attn_dim: 16,
        gst: GstConfig { conv_channels: vec![4, 4, 8], ref_hidden: 16, ..GstConfig::default() },
        ..ModelConfig::default()
    }
}

fn vocab() -> Vocab {
    Vocab::from_texts(["abcdefghijklmnopqrstuvwxyz .,'?!"]).unwrap()
}

fn small(variant: Variant) -> (Model, ParamStore<f32>) {
    Model::new(small_cfg(), vocab(), variant, 11).unwrap()
}

fn random_mel(seed: u64, frames: usize) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * 80).map(|_| rng.gen_range(-6.0f32..0.0)).collect();
    MelSpectrogram::new(data, frames, 80, 256, 22050)
}

fn embed(model: &Model, params: &ParamStore<f32>, mel: &MelSpectrogram, ae: bool) -> Vec<f32> {
    let mut s = Session::new(params, Mode::Eval, 0);
    let m = s.constant(mel_tensor(mel));
    let e = if ae { model.ae_embed(&mut s, m) } else { model.ace_embed(&mut s, m) }.unwrap();
    assert_eq!(s.graph.shape(e), &[1, 256]);
    s.graph.value(e).data().to_vec()
}

#[test]
fn single_character_encodes_to_one_row() {
    let (model, params) = small(Variant::NextTask);
    let mut s = Session::new(&params, Mode::Eval, 0);
    let e = model.encode_text(&mut s, "a").unwrap();
    assert_eq!(s.graph.shape(e), &[1, 32]);
    let (model, params) = Model::new::<f32>(ModelConfig::default(), vocab(), Variant::NextTask, 1).unwrap();
    let mut s = Session::new(&params, Mode::Eval, 0);
    let e = model.encode_text(&mut s, "a").unwrap();
    assert_eq!(s.graph.shape(e), &[1, 256]);
}

#[test]
fn text_encoding_is_deterministic_and_rejects_empty_text() {
    let (model, params) = small(Variant::NextTask);
    let run = |t: &str| {
        let mut s = Session::new(&params, Mode::Eval, 0);
        let e = model.encode_text(&mut s, t).unwrap();
        s.graph.value(e).clone()
    };
    assert_eq!(run("hello there."), run("hello there."));
    let mut s = Session::new(&params, Mode::Eval, 0);
    assert_eq!(model.encode_text(&mut s, "").unwrap_err().to_string(), "empty text");
    assert!(model.encode_text(&mut s, "a#b").unwrap_err().to_string().contains('#'));
}

#[test]
fn ace_and_ae_are_untied() {
    let (model, params) = small(Variant::NextTask);
    let mel = random_mel(1, 30);
    assert_ne!(embed(&model, &params, &mel, false), embed(&model, &params, &mel, true));
    let ace: Vec<&str> = params.iter().map(|p| p.1).filter(|n| n.starts_with("ace.")).collect();
    let ae: Vec<&str> = params.iter().map(|p| p.1).filter(|n| n.starts_with("ae.")).collect();
    assert_eq!(ace.len(), ae.len());
    assert!(!ace.is_empty());
    for name in &ace {
        assert!(!ae.contains(name));
        let twin = params.id(&name.replacen("ace.", "ae.", 1)).unwrap();
        assert_ne!(params.id(name).unwrap(), twin);
    }
}

#[test]
fn context_mel_changes_the_embedding() {
    let (model, params) = small(Variant::NextTask);
    assert_ne!(embed(&model, &params, &random_mel(1, 30), false), embed(&model, &params, &random_mel(2, 30), false));
}

fn alignment_sums(s: &Session<'_, f32>, out: &DecodeVars) -> Vec<f64> {
    out.alignment.iter().map(|&a| s.graph.value(a).data().iter().map(|&v| v as f64).sum()).collect()
}

#[test]
fn teacher_forcing_emits_target_length_with_normalized_alignment() {
    for point in [ContextPoint::DecoderInput, ContextPoint::EncoderOutputs] {
        let cfg = ModelConfig { context_point: point, ..small_cfg() };
        let (model, params) = Model::new::<f32>(cfg, vocab(), Variant::NextTask, 3).unwrap();
        let mut s = Session::new(&params, Mode::Train, 0);
        let enc = model.encode_text(&mut s, "a short text.").unwrap();
        let ctx_mel = s.constant(mel_tensor(&random_mel(4, 12)));
        let ctx = model.context(&mut s, Some(ctx_mel)).unwrap();
        let target = s.constant(mel_tensor(&random_mel(5, 17)));
        let out = model.decode(&mut s, enc, ctx, Some(target), DecodeMode::TeacherForced, 1000).unwrap();
        assert_eq!(s.graph.shape(out.mel), &[17, 80]);
        assert_eq!(s.graph.shape(out.stop), &[17, 1]);
        for sum in alignment_sums(&s, &out) {
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }
}

#[test]
fn mel_head_writes_standardized_frames() {
    let norm = MelNorm { mean: -4.5, std: 2.0 };
    let cfg = ModelConfig { mel_norm: norm, ..small_cfg() };
    let (model, mut params) = Model::new::<f32>(cfg, vocab(), Variant::AceOnly, 3).unwrap();
    let (w, b) = (model.decoder.mel_out.w, model.decoder.mel_out.b.unwrap());
    params.get_mut(w).data_mut().fill(0.0);
    params.get_mut(b).data_mut().fill(0.5);
    let mut s = Session::new(&params, Mode::Eval, 0);
    let enc = model.encode_text(&mut s, "abc").unwrap();
    let m = s.constant(mel_tensor(&random_mel(2, 9)));
    let ctx = model.context(&mut s, Some(m)).unwrap();
    let out = model.decode(&mut s, enc, ctx, None, DecodeMode::FreeRunning, 5).unwrap();
    assert!(s.graph.value(out.mel).data().iter().all(|&v| v == -3.5));

    let x = s.constant(mel_tensor(&random_mel(3, 4)));
    let z = norm.forward(&mut s, x).unwrap();
    let back = norm.inverse(&mut s, z).unwrap();
    for (a, b) in s.graph.value(x).data().iter().zip(s.graph.value(back).data()) {
        assert!((a - b).abs() < 1e-6);
    }
    for std in [0.0, -1.0, f64::NAN] {
        let bad = ModelConfig { mel_norm: MelNorm { mean: 0.0, std }, ..small_cfg() };
        assert!(Model::new::<f32>(bad, vocab(), Variant::AceOnly, 3).is_err());
    }
}

#[test]
fn free_running_respects_max_frames() {
    let (model, params) = small(Variant::NextTask);
    let mut s = Session::new(&params, Mode::Eval, 0);
    let enc = model.encode_text(&mut s, "abc").unwrap();
    let ctx_mel = s.constant(mel_tensor(&random_mel(4, 12)));
    let ctx = model.context(&mut s, Some(ctx_mel)).unwrap();
    let out = model.decode(&mut s, enc, ctx, None, DecodeMode::FreeRunning, 7).unwrap();
    assert!(s.graph.shape(out.mel)[0] <= 7);
    assert!(model.decode(&mut s, enc, ctx, None, DecodeMode::FreeRunning, 0).is_err());
    assert!(model.decode(&mut s, enc, ctx, None, DecodeMode::TeacherForced, 10).is_err());
}

#[test]
fn baseline_context_is_zero_and_ignores_the_mel() {
    let (model, params) = small(Variant::Baseline);
    let mut s = Session::new(&params, Mode::Eval, 0);
    let m = s.constant(mel_tensor(&random_mel(1, 10)));
    let c = model.context(&mut s, Some(m)).unwrap();
    assert_eq!(s.graph.value(c).data(), &[0.0; 256][..]);
    assert!(s.bound_names().iter().all(|n| !n.starts_with("ace.")));
}

#[test]
fn context_variants_require_a_context() {
    let (model, params) = small(Variant::AceOnly);
    let mut s = Session::new(&params, Mode::Eval, 0);
    assert!(matches!(model.context(&mut s, None), Err(ModelError::MissingContext(Variant::AceOnly))));
}

#[test]
fn head_dimensions_match_the_published_layers() {
    let (model, params) = Model::new::<f32>(ModelConfig::default(), vocab(), Variant::OrderTask, 0).unwrap();
    assert_eq!(model.order.0.dims(), ORDER_DIMS.to_vec());
    assert_eq!(model.next.0.dims(), NEXT_DIMS.to_vec());
    for l in model.order.0.layers.iter().chain(&model.next.0.layers) {
        assert_eq!(params.get(l.w).shape(), &[l.out_dim, l.in_dim]);
    }
    let mut s = Session::new(&params, Mode::Eval, 0);
    let a = s.constant(Tensor::zeros(&[2, 256]));
    let y = model.order_logit(&mut s, a, a).unwrap();
    assert_eq!(s.graph.shape(y), &[2, 1]);
    let y = model.next_predict(&mut s, a).unwrap();
    assert_eq!(s.graph.shape(y), &[2, 256]);
    let short = s.constant(Tensor::zeros(&[2, 255]));
    assert!(model.order_logit(&mut s, short, a).is_err());
    assert!(model.next_predict(&mut s, short).is_err());
}

#[test]
fn order_head_cannot_separate_identical_embeddings() {
    let (model, params) = small(Variant::OrderTask);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::new(&params, mode, 5);
        let ev = s.constant(Tensor::from_f64(&[4, 256], &e).unwrap());
        let fwd = model.order_logit(&mut s, ev, ev).unwrap();
        let mut s2 = Session::new(&params, mode, 5);
        let ev2 = s2.constant(Tensor::from_f64(&[4, 256], &e).unwrap());
        let swapped = model.order_logit(&mut s2, ev2, ev2).unwrap();
        assert_eq!(s.graph.value(fwd), s2.graph.value(swapped));
    }
}

type HeadCase<F> = (ParamStore<F>, Box<dyn Fn(&mut Session<'_, F>) -> Result<Var, NetError>>);

fn head_case<F: Element>(seed: u64, order: bool) -> HeadCase<F> {
    let (model, mut params) = Model::new::<F>(small_cfg(), vocab(), Variant::OrderTask, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let a: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ea = params.add("input.a", Tensor::from_f64(&[4, 256], &a).unwrap(), true).unwrap();
    let eb = params.add("input.b", Tensor::from_f64(&[4, 256], &b).unwrap(), true).unwrap();
    (params, Box::new(move |s| {
        let (va, vb) = (s.param(ea), s.param(eb));
        let (y, n) = if order { (model.order_logit(s, va, vb).unwrap(), 4) } else { (model.next_predict(s, va).unwrap(), 4 * 256) };
        let r = s.constant(Tensor::from_f64(s.graph.shape(y), &w[..n]).unwrap());
        let p = s.graph.mul(y, r)?;
        Ok(s.graph.sum(p)?)
    }))
}

fn head_grad_check<F: Element>(order: bool) {
    let tol = if F::NAME == "f64" { 1e-5 } else { 1e-3 };
    for seed in 0..10 {
        let (params, loss) = head_case::<F>(seed, order);
        let cfg = GradCheck { mode: Mode::Train, session_seed: seed, probe_seed: seed, ..GradCheck::default() };
        let report = if F::NAME == "f64" {
            check_gradients(&cfg, &params, |s| loss(s)).unwrap()
        } else {
            let (_, reference) = head_case::<f64>(seed, order);
            check_gradients_against(&cfg, &params, |s| loss(s), |s| reference(s)).unwrap()
        };
        let prefix = if order { "order." } else { "next." };
        assert!(report.per_param.iter().any(|p| p.name.starts_with(prefix)));
        assert!(report.max_rel_error < tol, "{} seed {seed}: {:?}", F::NAME, report.worst());
    }
}

#[test]
fn order_head_gradients_match_finite_differences() {
    head_grad_check::<f64>(true);
    head_grad_check::<f32>(true);
}

#[test]
fn next_head_gradients_match_finite_differences() {
    head_grad_check::<f64>(false);
    head_grad_check::<f32>(false);
}

fn request<'a>(text: &'a str, ctx: Option<&'a MelSpectrogram>, seed: u64) -> SynthesisRequest<'a> {
    SynthesisRequest { text, context: ctx, seed, max_frames: 20, griffin_lim_iters: 0 }
}

#[test]
fn synthesis_is_seeded_and_never_touches_the_acoustic_encoder() {
    let (model, params) = small(Variant::NextTask);
    let cfg = MelConfig::default();
    let ctx = random_mel(3, 16);
    let a = synthesize(&model, &params, &cfg, &request("hello.", Some(&ctx), 7)).unwrap();
    let b = synthesize(&model, &params, &cfg, &request("hello.", Some(&ctx), 7)).unwrap();
    assert_eq!(a.mel.data, b.mel.data);
    assert!(a.params_used.iter().any(|n| n.starts_with("ace.")));
    assert!(a.params_used.iter().all(|n| !n.starts_with("ae.")));
    for row in &a.alignment {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let other = synthesize(&model, &params, &cfg, &request("hello.", Some(&random_mel(8, 16)), 7)).unwrap();
    assert_ne!(a.mel.data, other.mel.data);
    assert!(matches!(synthesize(&model, &params, &cfg, &request("hello.", None, 7)), Err(ModelError::MissingContext(_))));
}

#[test]
fn baseline_synthesis_ignores_context() {
    let (model, params) = small(Variant::Baseline);
    let cfg = MelConfig::default();
    let ctx = random_mel(3, 16);
    let with = synthesize(&model, &params, &cfg, &request("hello.", Some(&ctx), 7)).unwrap();
    let without = synthesize(&model, &params, &cfg, &request("hello.", None, 7)).unwrap();
    assert_eq!(with.mel.data, without.mel.data);
    assert!(with.params_used.iter().all(|n| !n.starts_with("ace.") && !n.starts_with("ae.")));
}

#[test]
fn synthesis_can_render_audio() {
    let (model, params) = small(Variant::AceOnly);
    let ctx = random_mel(3, 16);
    let req = SynthesisRequest { griffin_lim_iters: 4, ..request("hi", Some(&ctx), 1) };
    let out = synthesize(&model, &params, &MelConfig::default(), &req).unwrap();
    let w = out.waveform.unwrap();
    assert_eq!(w.samples.len(), (out.mel.n_frames - 1) * 256 + 1024);
}

#[test]
fn variants_parse_from_names() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert_eq!("next".parse::<Variant>().unwrap(), Variant::NextTask);
    assert!("nope".parse::<Variant>().is_err());
}

#[test]
fn config_rejects_non_256_embeddings() {
    let cfg = ModelConfig { gst: GstConfig { emb_dim: 128, ..GstConfig::default() }, ..ModelConfig::default() };
    assert!(Model::new::<f32>(cfg, vocab(), Variant::NextTask, 0).is_err());
}
