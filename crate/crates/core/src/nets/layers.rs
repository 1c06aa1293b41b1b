use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dGeom, Element, Mode, Tensor, Var};

use super::{uniform, xavier_bound, NetError, ParamId, ParamStore, Session};

/// Fully connected layer `y = x Wᵀ + b` with `W: out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let w = store.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], xavier_bound(in_dim, out_dim)), true)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Linear { name: name.to_string(), w, b: Some(b), in_dim, out_dim })
    }

    /// `y = x Wᵀ`, for layers whose output is batch-normalized.
    pub fn without_bias<F: Element>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let w = store.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], xavier_bound(in_dim, out_dim)), true)?;
        Ok(Linear { name: name.to_string(), w, b: None, in_dim, out_dim })
    }

    /// `(in, out)` as in the weight-matrix convention `[in, out]`.
    pub fn dims(&self) -> [usize; 2] {
        [self.in_dim, self.out_dim]
    }

    /// `x: [N, in]` to `[N, out]`.
    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NetError::input(&self.name, format!("expected [N, {}] input, got {:?}", self.in_dim, shape)));
        }
        let w = s.param(self.w);
        let y = s.graph.matmul_nt(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                Ok(s.graph.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over `[N, C]` with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self, NetError> {
        Ok(BatchNorm1d {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], F::one()), false)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(NetError::input(&self.name, format!("expected [N, {}] input, got {:?}", self.channels, shape)));
        }
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = F::of(self.eps);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm_train(x, gamma, beta, eps)?;
                let n = shape[0] as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let params = s.params();
                let blend = |old: &Tensor<F>, new: &[F], k: f64| {
                    let data = old.data().iter().zip(new).map(|(&o, &v)| F::of((1.0 - m) * o.f64() + m * k * v.f64())).collect();
                    Tensor::new(vec![new.len()], data).expect("running stats keep their length")
                };
                let mean = blend(params.get(self.running_mean), &stats.mean, 1.0);
                let var = blend(params.get(self.running_var), &stats.var, unbias);
                s.record_stats(self.running_mean, mean);
                s.record_stats(self.running_var, var);
                Ok(y)
            }
            Mode::Eval => {
                let params = s.params();
                let (mean, var) = (params.get(self.running_mean).data(), params.get(self.running_var).data());
                Ok(s.graph.batchnorm_eval(x, gamma, beta, mean, var, eps)?)
            }
        }
    }
}

/// 2-D convolution `x: [N, C, H, W] -> [N, O, H', W']` with a bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: Conv2dGeom,
}

impl Conv2dLayer {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        let fan_in = in_channels * kernel * kernel;
        let bound = xavier_bound(fan_in, out_channels * kernel * kernel);
        let w = store.add(format!("{name}.weight"), uniform(rng, &[out_channels, in_channels, kernel, kernel], bound), true)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?;
        let geom = Conv2dGeom { stride: (stride, stride), padding: (padding, padding) };
        Ok(Conv2dLayer { name: name.to_string(), w, b, in_channels, out_channels, kernel, geom })
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.geom.padding.0).saturating_sub(self.kernel) / self.geom.stride.0 + 1
    }

    pub fn forward<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        Ok(s.graph.conv2d(x, w, Some(b), self.geom)?)
    }
}

/// Gated recurrent unit with gates stacked `[update; reset; candidate]`:
///
/// ```text
/// z  = σ(W_z x + b_z + U_z h + c_z)
/// r  = σ(W_r x + b_r + U_r h + c_r)
/// h̃  = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub name: String,
    /// `[3H, in]`
    pub w_ih: ParamId,
    /// `[3H, H]`
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        let k = 1.0 / (hidden as f64).sqrt();
        Ok(GruCell {
            name: name.to_string(),
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, &[3 * hidden, in_dim], k), true)?,
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, &[3 * hidden, hidden], k), true)?,
            b_ih: store.add(format!("{name}.b_ih"), uniform(rng, &[3 * hidden], k), true)?,
            b_hh: store.add(format!("{name}.b_hh"), uniform(rng, &[3 * hidden], k), true)?,
            in_dim,
            hidden,
        })
    }

    /// Input projection `x W_ihᵀ + b_ih` for `x: [N, in]`, shared by
    /// [`GruCell::step_projected`].
    pub fn project_input<F: Element>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var, NetError> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NetError::input(&self.name, format!("expected [N, {}] input, got {:?}", self.in_dim, shape)));
        }
        let w = s.param(self.w_ih);
        let b = s.param(self.b_ih);
        let gx = s.graph.matmul_nt(x, w)?;
        Ok(s.graph.add(gx, b)?)
    }

    /// One step from a precomputed input projection `gx: [N, 3H]`.
    pub fn step_projected<F: Element>(&self, s: &mut Session<'_, F>, gx: Var, h: Var) -> Result<Var, NetError> {
        let hs = s.graph.shape(h);
        let n = s.graph.shape(gx)[0];
        if hs != [n, self.hidden] {
            return Err(NetError::input(&self.name, format!("expected [{n}, {}] state, got {:?}", self.hidden, hs)));
        }
        let hd = self.hidden;
        let w = s.param(self.w_hh);
        let b = s.param(self.b_hh);
        let gh = s.graph.matmul_nt(h, w)?;
        let gh = s.graph.add(gh, b)?;
        let g = &mut s.graph;
        let (xz, xr, xn) = (g.slice(gx, 1, 0, hd)?, g.slice(gx, 1, hd, hd)?, g.slice(gx, 1, 2 * hd, hd)?);
        let (hz, hr, hn) = (g.slice(gh, 1, 0, hd)?, g.slice(gh, 1, hd, hd)?, g.slice(gh, 1, 2 * hd, hd)?);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, hn)?;
        let cand = g.add(xn, rn)?;
        let cand = g.tanh(cand)?;
        let keep = g.one_minus(z)?;
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        Ok(g.add(old, new)?)
    }

    pub fn step<F: Element>(&self, s: &mut Session<'_, F>, x: Var, h: Var) -> Result<Var, NetError> {
        let gx = self.project_input(s, x)?;
        self.step_projected(s, gx, h)
    }

    pub fn zero_state<F: Element>(&self, s: &mut Session<'_, F>, batch: usize) -> Var {
        s.constant(Tensor::zeros(&[batch, self.hidden]))
    }
}

/// A GRU unrolled over a single sequence `xs: [T, in]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub cell: GruCell,
}

impl Gru {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        Ok(Gru { cell: GruCell::new(store, name, in_dim, hidden, rng)? })
    }

    /// Hidden states `[1, H]` in time order. With `reverse` the sequence is
    /// consumed back to front but the states are still returned in time order.
    pub fn run<F: Element>(&self, s: &mut Session<'_, F>, xs: Var, reverse: bool) -> Result<Vec<Var>, NetError> {
        let t_len = s.graph.shape(xs)[0];
        if t_len == 0 {
            return Err(NetError::input(&self.cell.name, "empty sequence"));
        }
        let gx = self.cell.project_input(s, xs)?;
        let mut h = self.cell.zero_state(s, 1);
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let g = s.graph.slice(gx, 0, t, 1)?;
            h = self.cell.step_projected(s, g, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}
