//! The conditional denoiser `f_θ(xⁿ, n | h)`.
//!
//! History encoder: `[EMB_enc(m); cos(ω (t − anchor) + β)]` per event
//! through a GRU; the final state is the history embedding `h`.
//!
//! Decoder: event blocks of `xⁿ` are projected from width `d + 1` to `d`,
//! run through a GRU started at `h` (or a per-event feedforward layer) to
//! get `gⁿ`, then through gated dilated-convolution residual blocks
//! conditioned on the step embedding `vⁿ`. Skip outputs are concatenated
//! and resized, and a final MLP on `[context; xⁿ; gⁿ]` emits `x̂⁰`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventdata::PredictionWindow;
use crate::numeric::{Affine, Graph, GruCell, ParamId, ParameterStore, Tensor, Var};
use crate::rng;
use crate::seqmap::{MarkEmbeddingTable, RoundingNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Gru,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Embedding and hidden width `d`.
    pub mark_dim: usize,
    /// Residual blocks; 0 drops the convolution stack entirely.
    pub n_blocks: usize,
    pub kernel: usize,
    pub num_marks: usize,
    pub history_len: usize,
    pub target_len: usize,
    pub steps: usize,
    /// Output width of the skip-aggregation MLP.
    pub skip_width: usize,
    pub decoder: DecoderKind,
    /// Reparameterization noise of the diffusion-side mark embedding.
    pub sigma0: f64,
    pub rounding_hidden: usize,
}

impl DenoiserConfig {
    pub fn new(
        mark_dim: usize,
        n_blocks: usize,
        num_marks: usize,
        history_len: usize,
        target_len: usize,
        steps: usize,
    ) -> Self {
        Self {
            mark_dim,
            n_blocks,
            kernel: 3,
            num_marks,
            history_len,
            target_len,
            steps,
            skip_width: mark_dim,
            decoder: DecoderKind::Gru,
            sigma0: 0.1,
            rounding_hidden: mark_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.mark_dim > 0, "mark_dim must be positive"),
            (self.kernel % 2 == 1, "kernel size must be odd"),
            (self.num_marks > 0, "num_marks must be positive"),
            (self.history_len > 0, "history_len must be positive"),
            (self.target_len > 0, "target_len must be positive"),
            (self.steps > 0, "steps must be positive"),
            (self.skip_width > 0, "skip_width must be positive"),
            (self.rounding_hidden > 0, "rounding_hidden must be positive"),
            (self.sigma0 >= 0.0, "sigma0 must be nonnegative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Dilation of block `i`.
    pub fn dilation(&self, i: usize) -> usize {
        1 << i
    }

    /// Length of a flattened diffusion vector, `L'(d + 1)`.
    pub fn vector_len(&self) -> usize {
        self.target_len * (self.mark_dim + 1)
    }
}

/// Sinusoidal code `pⁿ`: `sin(n / 10000^{2i/d})` at even index `2i`,
/// `cos` of the same argument at odd index `2i + 1`.
pub fn step_code(n: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let arg = n as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// Gated residual block: conv over `x_in + vⁿ`, plus a 1×1 map of `gⁿ`,
/// `tanh ⊙ σ` over the channel halves, then residual and skip projections.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBlock {
    pub kernel: ParamId,
    pub conv_bias: ParamId,
    pub cond: Affine,
    pub proj: Affine,
    pub skip: Affine,
    pub dilation: usize,
    pub channels: usize,
}

impl ResidualBlock {
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((channels * kernel) as f64).sqrt();
        Ok(Self {
            kernel: store.add(
                format!("{name}.conv.weight"),
                Tensor::uniform(&[2 * channels, channels, kernel], bound, rng),
                true,
            )?,
            conv_bias: store.add(
                format!("{name}.conv.bias"),
                Tensor::uniform(&[2 * channels], bound, rng),
                false,
            )?,
            cond: Affine::new(store, &format!("{name}.cond"), channels, 2 * channels, true, rng)?,
            proj: Affine::new(store, &format!("{name}.proj"), channels, channels, true, rng)?,
            skip: Affine::new(store, &format!("{name}.skip"), channels, channels, true, rng)?,
            dilation,
            channels,
        })
    }

    /// `x_in`, `g_n`: `[B, L', c]`; `v_n`: `[B, c]`. Returns
    /// `(pass_through, skip)`, both `[B, L', c]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x_in: Var, g_n: Var, v_n: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x_in).to_vec();
        if shape.len() != 3 || shape[2] != self.channels || g.shape(g_n) != shape.as_slice() {
            return Err(Error::dim(
                "residual_block",
                format!("x_in {shape:?}, g_n {:?}, channels {}", g.shape(g_n), self.channels),
            ));
        }
        if g.shape(v_n) != [shape[0], self.channels] {
            return Err(Error::dim(
                "residual_block",
                format!("step embedding {:?}", g.shape(v_n)),
            ));
        }
        let v = g.expand(v_n, 1, shape[1])?;
        let u = g.add(x_in, v)?;
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.conv_bias);
        let y = g.dilated_conv1d(u, k, Some(b), self.dilation)?;
        let c = self.cond.forward(g, store, g_n)?;
        let y = g.add(y, c)?;
        let a = g.narrow(y, 0, self.channels)?;
        let a = g.tanh(a);
        let s = g.narrow(y, self.channels, self.channels)?;
        let s = g.sigmoid(s);
        let gated = g.mul(a, s)?;
        let p = self.proj.forward(g, store, gated)?;
        let pass = g.add(x_in, p)?;
        let skip = self.skip.forward(g, store, gated)?;
        Ok((pass, skip))
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Gru(GruCell),
    Mlp(Affine),
}

/// Layer handles of the denoiser, the diffusion-side mark table `φ` and
/// the rounding network. Parameter values live in a separate store.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    pub phi: MarkEmbeddingTable,
    pub rounding: RoundingNetwork,
    enc_marks: ParamId,
    time2vec: Affine,
    enc_gru: GruCell,
    step_in: Affine,
    step_out: Affine,
    in_proj: Affine,
    decoder: Decoder,
    pub blocks: Vec<ResidualBlock>,
    skip_mlp: Option<Affine>,
    head_hidden: Affine,
    head_out: Affine,
}

/// Encoded histories, `[B, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryContext {
    pub h: Tensor,
}

impl HistoryContext {
    pub fn rows(&self) -> usize {
        self.h.shape()[0]
    }
}

impl Denoiser {
    /// Registers every parameter in `store`, initialized from `seed`.
    pub fn build(config: DenoiserConfig, store: &mut ParameterStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init", &[]);
        let r = &mut r;
        let d = config.mark_dim;
        let phi = MarkEmbeddingTable::new(store, "phi.table", config.num_marks, d, config.sigma0, r)?;
        let rounding = RoundingNetwork::new(store, "rounding", d, config.rounding_hidden, config.num_marks, r)?;
        let enc_marks = store.add(
            "encoder.marks",
            Tensor::randn(&[config.num_marks, d], 1.0 / (d as f64).sqrt(), r),
            true,
        )?;
        let time2vec = Affine::new(store, "encoder.time2vec", 1, d, true, r)?;
        let enc_gru = GruCell::new(store, "encoder.gru", 2 * d, d, r)?;
        let step_in = Affine::new(store, "step.u1", d, d, true, r)?;
        let step_out = Affine::new(store, "step.u2", d, d, true, r)?;
        let in_proj = Affine::new(store, "decoder.input", d + 1, d, true, r)?;
        let decoder = match config.decoder {
            DecoderKind::Gru => Decoder::Gru(GruCell::new(store, "decoder.gru", d, d, r)?),
            DecoderKind::Mlp => Decoder::Mlp(Affine::new(store, "decoder.mlp", 2 * d, d, true, r)?),
        };
        let blocks = (0..config.n_blocks)
            .map(|i| ResidualBlock::new(store, &format!("block{i}"), d, config.kernel, config.dilation(i), r))
            .collect::<Result<Vec<_>>>()?;
        let skip_mlp = if config.n_blocks > 0 {
            Some(Affine::new(
                store,
                "skip.mlp",
                config.n_blocks * d,
                config.skip_width,
                true,
                r,
            )?)
        } else {
            None
        };
        let context = if config.n_blocks > 0 { config.skip_width } else { 0 };
        let head_hidden = Affine::new(store, "head.hidden", context + 2 * d + 1, 2 * d, true, r)?;
        let head_out = Affine::new(store, "head.output", 2 * d, d + 1, true, r)?;
        Ok(Self {
            config,
            phi,
            rounding,
            enc_marks,
            time2vec,
            enc_gru,
            step_in,
            step_out,
            in_proj,
            decoder,
            blocks,
            skip_mlp,
            head_hidden,
            head_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// `[EMB_enc(m); cos(ω t + β)]` for `marks.len()` events; `rel_times`
    /// are times relative to the anchor. Output `[n, 2d]`.
    pub fn embed_events(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        marks: &[usize],
        rel_times: &[f64],
    ) -> Result<Var> {
        if marks.len() != rel_times.len() {
            return Err(Error::dim(
                "embed_event",
                format!("{} marks, {} times", marks.len(), rel_times.len()),
            ));
        }
        let table = g.param(store, self.enc_marks);
        let m = g.gather(table, marks)?;
        let t = g.constant(Tensor::new(vec![rel_times.len(), 1], rel_times.to_vec())?);
        let phase = self.time2vec.forward(g, store, t)?;
        let te = g.cos(phase);
        g.concat(&[m, te])
    }

    /// History embeddings `h`, `[B, d]`.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParameterStore, windows: &[PredictionWindow]) -> Result<Var> {
        let (b, l, d) = (windows.len(), self.config.history_len, self.config.mark_dim);
        if b == 0 {
            return Err(Error::Contract("no windows to encode".into()));
        }
        let mut marks = Vec::with_capacity(b * l);
        let mut rel = Vec::with_capacity(b * l);
        for w in windows {
            if w.history.len() != l {
                return Err(Error::Contract(format!(
                    "history has {} events, expected {l}",
                    w.history.len()
                )));
            }
            marks.extend_from_slice(&w.history.marks);
            rel.extend(w.history.times.iter().map(|t| t - w.anchor));
        }
        let e = self.embed_events(g, store, &marks, &rel)?;
        let e = g.reshape(e, &[b, l, 2 * d])?;
        let h0 = g.constant(Tensor::zeros(&[b, d]));
        let (_, h) = self.enc_gru.run(g, store, e, h0)?;
        Ok(h)
    }

    pub fn encode(&self, store: &ParameterStore, windows: &[PredictionWindow]) -> Result<HistoryContext> {
        let mut g = Graph::new();
        let h = self.encode_graph(&mut g, store, windows)?;
        g.check_finite()?;
        Ok(HistoryContext { h: g.value(h).clone() })
    }

    /// `vⁿ = U₂ SiLU(U₁ pⁿ + c₁) + c₂` for each row's level, `[B, d]`.
    pub fn step_embedding_graph(&self, g: &mut Graph, store: &ParameterStore, levels: &[usize]) -> Result<Var> {
        let d = self.config.mark_dim;
        if let Some(&bad) = levels.iter().find(|&&n| n > self.config.steps) {
            return Err(Error::Index(format!(
                "diffusion level {bad} outside 0..={}",
                self.config.steps
            )));
        }
        let codes: Vec<f64> = levels.iter().flat_map(|&n| step_code(n, d)).collect();
        let p = g.constant(Tensor::new(vec![levels.len(), d], codes)?);
        let u = self.step_in.forward(g, store, p)?;
        let u = g.silu(u);
        self.step_out.forward(g, store, u)
    }

    /// `x̂⁰` from `x_n: [B, L', d+1]`, per-row levels and `h: [B, d]`.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x_n: Var,
        levels: &[usize],
        h: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (lp, d) = (cfg.target_len, cfg.mark_dim);
        let b = levels.len();
        if g.shape(x_n) != [b, lp, d + 1] {
            return Err(Error::dim(
                "denoise_forward",
                format!("input {:?}, expected [{b}, {lp}, {}]", g.shape(x_n), d + 1),
            ));
        }
        if g.shape(h) != [b, d] {
            return Err(Error::dim(
                "denoise_forward",
                format!("history embedding {:?}, expected [{b}, {d}]", g.shape(h)),
            ));
        }
        let v = self.step_embedding_graph(g, store, levels)?;
        let x_in = self.in_proj.forward(g, store, x_n)?;
        let seq = match &self.decoder {
            Decoder::Gru(cell) => cell.run(g, store, x_in, h)?.0,
            Decoder::Mlp(layer) => {
                let hx = g.expand(h, 1, lp)?;
                let joined = g.concat(&[x_in, hx])?;
                let y = layer.forward(g, store, joined)?;
                g.gelu(y)
            }
        };
        let mut parts = Vec::with_capacity(3);
        if let Some(mlp) = &self.skip_mlp {
            let mut z = x_in;
            let mut skips = Vec::with_capacity(self.blocks.len());
            for block in &self.blocks {
                let (pass, skip) = block.forward(g, store, z, seq, v)?;
                z = pass;
                skips.push(skip);
            }
            let joined = g.concat(&skips)?;
            let ctx = mlp.forward(g, store, joined)?;
            parts.push(g.gelu(ctx));
        }
        parts.push(x_n);
        parts.push(seq);
        let fused = g.concat(&parts)?;
        let hid = self.head_hidden.forward(g, store, fused)?;
        let hid = g.gelu(hid);
        self.head_out.forward(g, store, hid)
    }

    /// Batched `x̂⁰` for flattened `xn` (`[B · L'(d+1)]`) at a shared level.
    pub fn predict_x0(&self, store: &ParameterStore, ctx: &HistoryContext, xn: &[f64], n: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let b = ctx.rows();
        if xn.len() != b * cfg.vector_len() {
            return Err(Error::dim(
                "denoise_forward",
                format!("{} values for {b} windows", xn.len()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![b, cfg.target_len, cfg.mark_dim + 1], xn.to_vec())?);
        let h = g.constant(ctx.h.clone());
        let out = self.denoise_graph(&mut g, store, x, &vec![n; b], h)?;
        g.check_finite()?;
        Ok(g.value(out).data().to_vec())
    }
}

/// A denoiser together with its parameter values.
#[derive(Clone, Debug)]
pub struct DenoisingModel {
    pub net: Denoiser,
    pub store: ParameterStore,
}

impl DenoisingModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        let net = Denoiser::build(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.net.config()
    }

    pub fn encode(&self, windows: &[PredictionWindow]) -> Result<HistoryContext> {
        self.net.encode(&self.store, windows)
    }

    pub fn predict_x0(&self, ctx: &HistoryContext, xn: &[f64], n: usize) -> Result<Vec<f64>> {
        self.net.predict_x0(&self.store, ctx, xn, n)
    }

    pub fn mark_table_values(&self) -> &Tensor {
        self.net.phi.rows(&self.store)
    }

    /// Rounding-network argmax per `d`-wide mark block.
    pub fn round_marks(&self, x_mark: &[f64]) -> Result<Vec<usize>> {
        self.net.rounding.argmax(&self.store, x_mark, self.config().mark_dim)
    }
}
