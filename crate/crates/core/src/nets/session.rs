use crate::autodiff::{Element, Graph, Mode, Tensor, Var};

use super::{NetError, ParamId, ParamStore};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One forward pass: a fresh graph, lazily bound parameters, and the
/// dropout seed stream.
///
/// Parameters enter the graph the first time a layer asks for them, so
/// [`Session::bound`] records exactly which parameters a pass touched.
pub struct Session<'p, F: Element = f32> {
    pub graph: Graph<F>,
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    seed: u64,
    dropout_calls: u64,
    stat_updates: Vec<(ParamId, Tensor<F>)>,
}

impl<'p, F: Element> Session<'p, F> {
    pub fn new(params: &'p ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            seed,
            dropout_calls: 0,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Graph variable for a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.params.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    fn next_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        splitmix64(self.seed ^ splitmix64(self.dropout_calls))
    }

    /// Dropout following the session mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NetError> {
        let seed = self.next_seed();
        Ok(self.graph.dropout(x, p, self.mode, seed)?)
    }

    /// Dropout that stays active in eval mode (the stochastic prenet).
    pub fn dropout_always(&mut self, x: Var, p: f64) -> Result<Var, NetError> {
        let seed = self.next_seed();
        Ok(self.graph.dropout(x, p, Mode::Train, seed)?)
    }

    pub(crate) fn record_stats(&mut self, id: ParamId, value: Tensor<F>) {
        self.stat_updates.push((id, value));
    }

    /// Parameters bound during this pass, with their graph variables.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v))).collect()
    }

    pub fn bound_names(&self) -> Vec<&'p str> {
        let params = self.params;
        self.bound().into_iter().map(|(id, _)| params.name(id)).collect()
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<F>)> {
        std::mem::take(&mut self.stat_updates)
    }
}
