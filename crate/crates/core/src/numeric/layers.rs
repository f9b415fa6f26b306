use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Affine map `x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Affine {
    /// Uniform ±1/√in initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[out, inp], bound, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::uniform(&[out], bound, rng), false)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn out_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// Fully gated recurrent unit with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut add = |suffix: &str, shape: &[usize], decay: bool| {
            store.add(format!("{name}.{suffix}"), Tensor::uniform(shape, bound, rng), decay)
        };
        Ok(Self {
            w_ih: add("w_ih", &[3 * hidden, input], true)?,
            w_hh: add("w_hh", &[3 * hidden, hidden], true)?,
            b_ih: add("b_ih", &[3 * hidden], false)?,
            b_hh: add("b_hh", &[3 * hidden], false)?,
            input,
            hidden,
        })
    }

    fn input_projection(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b_ih);
        g.linear(x, w, Some(b))
    }

    /// One recurrence step from a precomputed input projection `[.., 3h]`.
    fn step_projected(&self, g: &mut Graph, store: &ParameterStore, gi: Var, h_prev: Var) -> Result<Var> {
        let hs = self.hidden;
        let w = g.param(store, self.w_hh);
        let b = g.param(store, self.b_hh);
        let gh = g.linear(h_prev, w, Some(b))?;
        let (ir, iz, inn) = (g.narrow(gi, 0, hs)?, g.narrow(gi, hs, hs)?, g.narrow(gi, 2 * hs, hs)?);
        let (hr, hz, hn) = (g.narrow(gh, 0, hs)?, g.narrow(gh, hs, hs)?, g.narrow(gh, 2 * hs, hs)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(inn, rn)?;
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h_prev, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    pub fn cell(&self, g: &mut Graph, store: &ParameterStore, x: Var, h_prev: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.input || g.value(h_prev).last_dim() != self.hidden {
            return Err(Error::dim(
                "gru_cell",
                format!(
                    "x {:?} / h {:?} vs input {} hidden {}",
                    g.shape(x),
                    g.shape(h_prev),
                    self.input,
                    self.hidden
                ),
            ));
        }
        let gi = self.input_projection(g, store, x)?;
        self.step_projected(g, store, gi, h_prev)
    }

    /// Runs over `xs: [B, L, in]` from `h0: [B, h]`; returns every hidden
    /// state stacked as `[B, L, h]` plus the final state.
    pub fn run(&self, g: &mut Graph, store: &ParameterStore, xs: Var, h0: Var) -> Result<(Var, Var)> {
        let shape = g.shape(xs).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::dim(
                "gru",
                format!("input {shape:?}, expected [B, L, {}]", self.input),
            ));
        }
        if g.shape(h0) != [shape[0], self.hidden] {
            return Err(Error::dim(
                "gru",
                format!("initial state {:?} vs [{}, {}]", g.shape(h0), shape[0], self.hidden),
            ));
        }
        let gi_all = self.input_projection(g, store, xs)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(shape[1]);
        for t in 0..shape[1] {
            let gi = g.select(gi_all, 1, t)?;
            h = self.step_projected(g, store, gi, h)?;
            states.push(h);
        }
        let stacked = g.stack(&states, 1)?;
        Ok((stacked, h))
    }
}
