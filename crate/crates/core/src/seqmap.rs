//! Map between target event windows and the Euclidean diffusion space.
//!
//! Each of the `L'` target events becomes a block `[x_time; x_mark]` of
//! width `d + 1`: `x_time` is the log of the gap to the previous event
//! (the anchor for the first one) and `x_mark` is a noisy row of the mark
//! embedding table. Times invert exactly; marks go back through the
//! rounding network or the nearest-row clamp.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eventdata::EventSequence;
use crate::numeric::{softmax_rows, Affine, Graph, ParamId, ParameterStore, Tensor, Var};

/// Gaps are floored here before the logarithm.
pub const INTERVAL_FLOOR: f64 = 1e-6;
/// Upper clip for log-gaps in [`time_inverse`]; exp(20) ≈ 4.9e8 normalized
/// units, far beyond any real window.
pub const LOG_GAP_CAP: f64 = 20.0;

/// Flattened `[L', d + 1]` diffusion-space image of a target window.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionVector {
    data: Vec<f64>,
    mark_dim: usize,
}

impl DiffusionVector {
    pub fn from_parts(x_time: &[f64], x_mark: &[f64], mark_dim: usize) -> Result<Self> {
        if x_mark.len() != x_time.len() * mark_dim {
            return Err(Error::dim(
                "diffusion_vector",
                format!(
                    "{} time entries vs {} mark entries at d={mark_dim}",
                    x_time.len(),
                    x_mark.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(x_time.len() * (mark_dim + 1));
        for (j, &t) in x_time.iter().enumerate() {
            data.push(t);
            data.extend_from_slice(&x_mark[j * mark_dim..(j + 1) * mark_dim]);
        }
        Ok(Self { data, mark_dim })
    }

    pub fn from_flat(data: Vec<f64>, mark_dim: usize) -> Result<Self> {
        if !data.len().is_multiple_of(mark_dim + 1) {
            return Err(Error::dim(
                "diffusion_vector",
                format!("length {} is not a multiple of d+1={}", data.len(), mark_dim + 1),
            ));
        }
        Ok(Self { data, mark_dim })
    }

    pub fn events(&self) -> usize {
        self.data.len() / (self.mark_dim + 1)
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn time_components(&self) -> Vec<f64> {
        self.data.iter().step_by(self.mark_dim + 1).copied().collect()
    }

    pub fn mark_components(&self) -> Vec<f64> {
        self.data
            .chunks(self.mark_dim + 1)
            .flat_map(|b| b[1..].iter().copied())
            .collect()
    }
}

/// `log` of the gaps `t_1 − anchor, t_2 − t_1, …`, each floored at
/// [`INTERVAL_FLOOR`].
pub fn time_forward(times: &[f64], anchor: f64) -> Result<Vec<f64>> {
    let mut prev = anchor;
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let gap = t - prev;
            if !(gap > 0.0) {
                return Err(Error::Contract(format!(
                    "non-positive interval {gap} at index {i} (anchor {anchor})"
                )));
            }
            prev = t;
            Ok(gap.max(INTERVAL_FLOOR).ln())
        })
        .collect()
}

/// Cumulative `anchor + Σ exp(x_r)`. Entries outside
/// `[ln INTERVAL_FLOOR, LOG_GAP_CAP]` are clipped; the second value counts
/// the clips.
pub fn time_inverse(x_time: &[f64], anchor: f64) -> (Vec<f64>, usize) {
    let lo = INTERVAL_FLOOR.ln();
    let mut clipped = 0;
    let mut t = anchor;
    let times = x_time
        .iter()
        .map(|&x| {
            let x = if x.is_nan() {
                clipped += 1;
                lo
            } else if x > LOG_GAP_CAP {
                clipped += 1;
                LOG_GAP_CAP
            } else if x < lo {
                clipped += 1;
                lo
            } else {
                x
            };
            t += x.exp();
            t
        })
        .collect();
    if clipped > 0 {
        log::warn!("time_inverse clipped {clipped} log-gap(s) to [{lo:.3}, {LOG_GAP_CAP}]");
    }
    (times, clipped)
}

/// Learnable `K × d` mark embedding table (the `φ` parameters) and its
/// reparameterization noise scale.
#[derive(Clone, Copy, Debug)]
pub struct MarkEmbeddingTable {
    pub param: ParamId,
    pub num_marks: usize,
    pub dim: usize,
    pub sigma0: f64,
}

impl MarkEmbeddingTable {
    /// Registers a table initialized from N(0, 1/d).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        num_marks: usize,
        dim: usize,
        sigma0: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(sigma0 >= 0.0) {
            return Err(Error::Config(format!("sigma0 must be nonnegative, got {sigma0}")));
        }
        let param = store.add(
            name,
            Tensor::randn(&[num_marks, dim], 1.0 / (dim as f64).sqrt(), rng),
            true,
        )?;
        Ok(Self {
            param,
            num_marks,
            dim,
            sigma0,
        })
    }

    pub fn rows<'a>(&self, store: &'a ParameterStore) -> &'a Tensor {
        store.value(self.param)
    }

    /// Graph-side `EMB(m) + σ₀ · noise`, `[marks.len(), d]`; `noise` is the
    /// standard-normal draw (length `marks.len() · d`) or `None` for the
    /// noiseless rows.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        marks: &[usize],
        noise: Option<&[f64]>,
    ) -> Result<Var> {
        let table = g.param(store, self.param);
        let rows = g.gather(table, marks)?;
        match noise {
            Some(eps) if self.sigma0 > 0.0 => {
                let scaled = Tensor::new(
                    vec![marks.len(), self.dim],
                    eps.iter().map(|e| e * self.sigma0).collect(),
                )?;
                let n = g.constant(scaled);
                g.add(rows, n)
            }
            _ => Ok(rows),
        }
    }
}

/// Draws `x_mark ~ N(EMB(m), σ₀² I)`, flattened `[marks.len() · d]`.
pub fn mark_embed<R: Rng + ?Sized>(marks: &[usize], table: &Tensor, sigma0: f64, rng: &mut R) -> Result<Vec<f64>> {
    let (k, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(marks.len() * d);
    for &m in marks {
        if m >= k {
            return Err(Error::Index(format!("mark {m} out of range for K={k}")));
        }
        for &e in &table.data()[m * d..(m + 1) * d] {
            let z: f64 = rng.sample(StandardNormal);
            out.push(e + sigma0 * z);
        }
    }
    Ok(out)
}

/// Index of the Euclidean-nearest table row; ties go to the lowest index.
pub fn nearest_mark(v: &[f64], table: &Tensor) -> usize {
    let d = table.shape()[1];
    let mut best = (0, f64::INFINITY);
    for (m, row) in table.data().chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (m, dist);
        }
    }
    best.0
}

/// Replaces each event's mark block with its nearest table row.
pub fn clamp_marks(x_mark: &[f64], table: &Tensor) -> Vec<f64> {
    let d = table.shape()[1];
    x_mark
        .chunks(d)
        .flat_map(|block| {
            let m = nearest_mark(block, table);
            table.data()[m * d..(m + 1) * d].to_vec()
        })
        .collect()
}

/// Clamps the mark part of every `[time; mark]` block in place.
pub fn clamp_blocks(x: &mut [f64], table: &Tensor) {
    let d = table.shape()[1];
    for block in x.chunks_mut(d + 1) {
        let m = nearest_mark(&block[1..], table);
        block[1..].copy_from_slice(&table.data()[m * d..(m + 1) * d]);
    }
}

/// `softmax(W₂ GELU(W₁ x + b₁) + b₂)` from a mark block to a distribution
/// over marks.
#[derive(Clone, Copy, Debug)]
pub struct RoundingNetwork {
    pub hidden: Affine,
    pub output: Affine,
    pub num_marks: usize,
}

impl RoundingNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        hidden: usize,
        num_marks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Affine::new(store, &format!("{name}.hidden"), dim, hidden, true, rng)?,
            output: Affine::new(store, &format!("{name}.output"), hidden, num_marks, true, rng)?,
            num_marks,
        })
    }

    /// Pre-softmax scores, `[.., K]`.
    pub fn logits(&self, g: &mut Graph, store: &ParameterStore, x_mark: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x_mark)?;
        let h = g.gelu(h);
        self.output.forward(g, store, h)
    }

    /// Per-event categorical distributions, flattened `[events, K]`.
    pub fn probabilities(&self, store: &ParameterStore, x_mark: &[f64], dim: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![x_mark.len() / dim, dim], x_mark.to_vec())?);
        let logits = self.logits(&mut g, store, x)?;
        g.check_finite()?;
        Ok(softmax_rows(g.value(logits).data(), self.num_marks))
    }

    /// Most probable mark per event (lowest index on ties).
    pub fn argmax(&self, store: &ParameterStore, x_mark: &[f64], dim: usize) -> Result<Vec<usize>> {
        let probs = self.probabilities(store, x_mark, dim)?;
        Ok(probs.chunks(self.num_marks).map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward map `q_φ(x⁰ | S')` for one target window.
pub fn encode_target<R: Rng + ?Sized>(
    target: &EventSequence,
    anchor: f64,
    table: &Tensor,
    sigma0: f64,
    rng: &mut R,
) -> Result<DiffusionVector> {
    let x_time = time_forward(&target.times, anchor)?;
    let x_mark = mark_embed(&target.marks, table, sigma0, rng)?;
    DiffusionVector::from_parts(&x_time, &x_mark, table.shape()[1])
}

/// Reconstructs an event window from `x⁰`: times through the inverse time
/// map, marks through `decode_mark` applied to each mark block.
pub fn decode_target<F>(x: &DiffusionVector, anchor: f64, mut decode_mark: F) -> (EventSequence, usize)
where
    F: FnMut(&[f64]) -> usize,
{
    let (times, clipped) = time_inverse(&x.time_components(), anchor);
    let marks = x
        .as_slice()
        .chunks(x.mark_dim() + 1)
        .map(|b| decode_mark(&b[1..]))
        .collect();
    (EventSequence { marks, times }, clipped)
}
