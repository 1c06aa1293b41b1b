use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Element, Mode, Var};

use super::{NetError, ParamId, ParamStore, Session};

/// Backward-versus-central-difference comparison over every trainable
/// parameter a loss touches.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub mode: Mode,
    /// Seed of the forward session, fixed so dropout masks repeat.
    pub session_seed: u64,
    /// Coordinates probed per tensor; tensors this small or smaller are
    /// probed exhaustively.
    pub probes: usize,
    /// Central-difference step. The default `1e-4` keeps round-off below
    /// `1e-7` relative for losses whose magnitude dwarfs the gradients of
    /// deep, saturated layers; truncation at this step is smaller still.
    pub eps: f64,
    pub probe_seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { mode: Mode::Train, session_seed: 0, probes: 12, eps: 1e-4, probe_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

type LossFn<'a, F> = dyn FnMut(&mut Session<'_, F>) -> Result<Var, NetError> + 'a;

/// Loss at `params` with every ReLU gated as at the reference point.
fn eval<F: Element>(cfg: &GradCheck, params: &ParamStore<F>, pattern: &[bool], loss: &mut LossFn<'_, F>) -> Result<f64, NetError> {
    let mut s = Session::new(params, cfg.mode, cfg.session_seed);
    s.graph.freeze_relu_pattern(pattern.to_vec());
    let l = loss(&mut s)?;
    Ok(s.graph.value(l).item().f64())
}

/// Central difference at one coordinate of parameter `id`.
fn numeric<F: Element>(
    cfg: &GradCheck,
    work: &mut ParamStore<F>,
    id: ParamId,
    i: usize,
    pattern: &[bool],
    loss: &mut LossFn<'_, F>,
) -> Result<f64, NetError> {
    let orig = work.get(id).data()[i];
    let mut at = |x: f64| -> Result<(f64, f64), NetError> {
        let xf = F::of(x);
        work.get_mut(id).data_mut()[i] = xf;
        Ok((eval(cfg, work, pattern, loss)?, xf.f64()))
    };
    let (lu, xu) = at(orig.f64() + cfg.eps)?;
    let (ld, xd) = at(orig.f64() - cfg.eps)?;
    work.get_mut(id).data_mut()[i] = orig;
    Ok((lu - ld) / (xu - xd))
}

type Bound<F> = Vec<(ParamId, crate::autodiff::Tensor<F>)>;

/// Analytic gradients of every trainable parameter `loss` touches, and the
/// ReLU gating of the pass.
fn reference_pass<F: Element>(cfg: &GradCheck, params: &ParamStore<F>, loss: &mut LossFn<'_, F>) -> Result<(Bound<F>, Vec<bool>), NetError> {
    let mut s = Session::new(params, cfg.mode, cfg.session_seed);
    let l = loss(&mut s)?;
    let grads = s.graph.backward(l)?;
    let bound = s.bound().into_iter().filter(|(id, _)| params.is_trainable(*id)).map(|(id, v)| (id, grads.get(v))).collect();
    Ok((bound, s.graph.kink_pattern()))
}

/// Compares `bound` against central differences of `loss` on `work`.
fn compare<F: Element, G: Element>(
    cfg: &GradCheck,
    names: &ParamStore<F>,
    bound: Bound<F>,
    pattern: &[bool],
    work: &mut ParamStore<G>,
    loss: &mut LossFn<'_, G>,
) -> Result<GradCheckReport, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.probe_seed);
    let mut report = GradCheckReport::default();
    for (id, analytic) in bound {
        let n = analytic.numel();
        let idx: Vec<usize> = if n <= cfg.probes { (0..n).collect() } else { sample(&mut rng, n, cfg.probes).into_vec() };
        let mut numeric_grads = Vec::with_capacity(idx.len());
        for &i in &idx {
            numeric_grads.push(numeric(cfg, work, id, i, pattern, loss)?);
        }
        let scale = numeric_grads.iter().map(|v| v.abs()).fold(analytic.max_abs().f64(), f64::max);
        let err = if scale == 0.0 {
            0.0
        } else {
            idx.iter().zip(&numeric_grads).map(|(&i, &num)| (analytic.data()[i].f64() - num).abs()).fold(0.0, f64::max) / scale
        };
        report.probes += idx.len();
        report.max_rel_error = report.max_rel_error.max(err);
        report.per_param.push(ParamCheck { name: names.name(id).to_string(), rel_error: err, probes: idx.len() });
    }
    Ok(report)
}

/// Checks `loss` at `params`.
///
/// Perturbed evaluations keep the ReLU gating of the unperturbed pass, so
/// the difference quotient measures the same linear piece the backward pass
/// differentiates. For each probed coordinate the error is
/// `|analytic − numeric|` divided by the largest gradient magnitude of that
/// tensor.
pub fn check_gradients<F: Element>(
    cfg: &GradCheck,
    params: &ParamStore<F>,
    mut loss: impl FnMut(&mut Session<'_, F>) -> Result<Var, NetError>,
) -> Result<GradCheckReport, NetError> {
    let loss: &mut LossFn<'_, F> = &mut loss;
    let (bound, pattern) = reference_pass(cfg, params, loss)?;
    compare(cfg, params, bound, &pattern, &mut params.clone(), loss)
}

/// Checks the backward pass of `loss` in precision `F` against central
/// differences of `reference`, the same loss built in 64-bit arithmetic and
/// evaluated on `params` widened to `f64` (same dropout masks, same ReLU
/// gating). Differences taken in 32-bit arithmetic carry round-off near the
/// size of the gradients being checked; the widened network does not.
pub fn check_gradients_against<F: Element>(
    cfg: &GradCheck,
    params: &ParamStore<F>,
    mut loss: impl FnMut(&mut Session<'_, F>) -> Result<Var, NetError>,
    mut reference: impl FnMut(&mut Session<'_, f64>) -> Result<Var, NetError>,
) -> Result<GradCheckReport, NetError> {
    let (bound, pattern) = reference_pass(cfg, params, &mut loss)?;
    compare(cfg, params, bound, &pattern, &mut params.cast::<f64>(), &mut reference)
}
