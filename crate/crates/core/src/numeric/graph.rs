//! Computation record with reverse-mode accumulation.
//!
//! A [`Graph`] is built eagerly: every primitive computes its value on
//! insertion and appends a node. Node indices are a topological order, so
//! [`Graph::backward`] walks them once, last to first.
//!
//! Tensors carry an optional leading batch; primitives act on the trailing
//! axes and treat everything in front as rows.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{ParamId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Silu(Var),
    Cos(Var),
    Expand {
        x: Var,
        axis: usize,
        size: usize,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumSquares(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Silu(_) => "silu",
            Op::Cos(_) => "cos",
            Op::Expand { .. } => "expand",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Select { .. } => "select",
            Op::Stack { .. } => "stack",
            Op::Reshape(_) => "reshape",
            Op::Conv1d { .. } => "dilated_conv1d",
            Op::Gather { .. } => "gather",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// tanh approximation of GELU
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// y[m, n] = sum_k a[m, k] * b[k, n] (+ existing y if `accumulate`), with
/// explicit element strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    y: &mut [f64],
    accumulate: bool,
) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every caller passes slices whose extents cover the strided
    // m×k, k×n and m×n views described by the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            y.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Fails with the first node whose forward value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((node, op)) => Err(Error::NonFinite {
                node,
                op,
                phase: "forward",
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Brings a stored parameter into the record. Repeated requests for the
    /// same parameter share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Param(id), entry.trainable);
        self.params.insert(id, v);
        v
    }

    /// y = x Wᵀ + b over the last axis of x.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::dim("linear", format!("weight must be 2-D, got {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        let in_x = xs.last().copied().unwrap_or(1);
        if in_x != inp {
            return Err(Error::dim(
                "linear",
                format!("input width {in_x} vs weight {out}x{inp}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs output width {out}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![0.0; rows * out];
        gemm(
            rows,
            inp,
            out,
            self.data(x),
            inp,
            1,
            self.data(w),
            1,
            inp,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bd = self.data(b);
            for row in y.chunks_mut(out) {
                for (v, bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut shape = xs;
        match shape.last_mut() {
            Some(last) => *last = out,
            None => shape.push(out),
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::raw(shape, y), Op::Linear { x, w, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::raw(shape, data), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a);
        let t = Tensor::raw(
            value.shape().to_vec(),
            value.data().iter().map(|v| v * factor).collect(),
        );
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, factor), ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a);
        let t = Tensor::raw(value.shape().to_vec(), value.data().iter().map(|&v| f(v)).collect());
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Inserts a new axis of length `size` at `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() || size == 0 {
            return Err(Error::dim("expand", format!("axis {axis} size {size} on {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..size {
                out.extend_from_slice(block);
            }
        }
        let mut shape = xs;
        shape.insert(axis, size);
        let ng = self.ng(x);
        Ok(self.push(Tensor::raw(shape, out), Op::Expand { x, axis, size }, ng))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", format!("leading axes {:?} vs {lead:?}", s)));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let w = self.value(p).last_dim();
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::raw(shape, out), Op::Concat(parts.to_vec()), ng))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let w = xs.last().copied().unwrap_or(0);
        if len == 0 || start + len > w {
            return Err(Error::dim("narrow", format!("[{start}, {}) of width {w}", start + len)));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::raw(shape, out), Op::Narrow { x, start, len }, ng))
    }

    /// Picks one position along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || index >= xs[axis] {
            return Err(Error::dim("select", format!("index {index} on axis {axis} of {xs:?}")));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = xs;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::raw(shape, out), Op::Select { x, axis, index }, ng))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("stack", "no inputs"))?;
        let ps = self.shape(*first).to_vec();
        if axis > ps.len() {
            return Err(Error::dim("stack", format!("axis {axis} on {ps:?}")));
        }
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p) != ps.as_slice()) {
            return Err(Error::dim("stack", format!("{:?} vs {ps:?}", self.shape(*bad))));
        }
        let outer: usize = ps[..axis].iter().product();
        let inner: usize = ps[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for &p in parts {
                out.extend_from_slice(&self.data(p)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = ps;
        shape.insert(axis, parts.len());
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let t = self.value(x).clone().reshaped(shape.to_vec());
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Same-padded dilated 1-D convolution.
    ///
    /// `x` is `[.., L, c_in]`, `kernel` is `[c_out, c_in, k]` with odd `k`;
    /// output is `[.., L, c_out]` with
    /// `y[i, o] = bias[o] + Σ_j Σ_r kernel[o, j, r] · x[i + (r − (k−1)/2)·dilation, j]`
    /// and zeros outside `[0, L)`.
    pub fn dilated_conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 {
            return Err(Error::dim("dilated_conv1d", format!("kernel must be 3-D, got {ks:?}")));
        }
        let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[xs.len() - 1] != c_in {
            return Err(Error::dim("dilated_conv1d", format!("input {xs:?} vs kernel {ks:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("dilated_conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let len = xs[xs.len() - 2];
        let batch = self.value(x).numel() / (len * c_in);
        let half = (k - 1) / 2;
        // [r][o][j] layout keeps the inner dot product contiguous.
        let kd = self.data(kernel);
        let mut kr = vec![0.0; k * c_out * c_in];
        for o in 0..c_out {
            for j in 0..c_in {
                for r in 0..k {
                    kr[(r * c_out + o) * c_in + j] = kd[(o * c_in + j) * k + r];
                }
            }
        }
        let xd = self.data(x);
        let mut y = vec![0.0; batch * len * c_out];
        for b in 0..batch {
            for i in 0..len {
                let yrow = &mut y[(b * len + i) * c_out..(b * len + i + 1) * c_out];
                if let Some(bv) = bias {
                    yrow.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for r in 0..k {
                    let src = i as isize + (r as isize - half as isize) * dilation as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &xd[(b * len + src as usize) * c_in..][..c_in];
                    for (o, yv) in yrow.iter_mut().enumerate() {
                        let w = &kr[(r * c_out + o) * c_in..][..c_in];
                        *yv += w.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let ng = self.ng(x) || self.ng(kernel) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::raw(shape, y),
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            ng,
        ))
    }

    /// Row lookup: `[indices.len(), d]` from a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("gather", format!("table must be 2-D, got {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if indices.is_empty() {
            return Err(Error::dim("gather", "empty index list"));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::raw(vec![indices.len(), d], out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let classes = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / classes;
        if rows != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{rows} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = softmax_rows(self.data(logits), classes);
        let mut loss = 0.0;
        for (row, (&label, p)) in self
            .data(logits)
            .chunks(classes)
            .zip(labels.iter().zip(probs.chunks(classes)))
        {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            debug_assert!(p[label] >= 0.0);
        }
        loss /= rows as f64;
        probs.shrink_to_fit();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).squared_norm();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse accumulation from a scalar `loss` into the store's gradient
    /// buffers. Buffers are only touched when every gradient is finite;
    /// repeated calls add up.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        self.check_finite()?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if gy.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            self.backward_node(i, &gy, &mut grads, &mut param_grads);
        }
        for (id, g) in param_grads {
            if store.entry(id).trainable {
                store.accumulate_grad(id, &g);
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut Vec<(ParamId, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Adds `f(k)` to input `v`'s gradient for every flat index k.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (k, g) in slot.iter_mut().enumerate() {
                *g += f(k);
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => param_grads.push((*id, gy.to_vec())),
            Op::Linear { x, w, b } => {
                let (out, inp) = {
                    let s = self.shape(*w);
                    (s[0], s[1])
                };
                let rows = gy.len() / out;
                if self.ng(*x) {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; rows * inp]);
                    // dx = dy W
                    gemm(rows, out, inp, gy, out, 1, self.data(*w), inp, 1, slot, true);
                }
                if self.ng(*w) {
                    let slot = grads[w.0].get_or_insert_with(|| vec![0.0; out * inp]);
                    // dW = dyᵀ x
                    gemm(out, rows, inp, gy, 1, out, self.data(*x), inp, 1, slot, true);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let slot = grads[b.0].get_or_insert_with(|| vec![0.0; out]);
                        for row in gy.chunks(out) {
                            for (s, g) in slot.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|k| gy[k]);
                acc(grads, *b, &|k| gy[k]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|k| gy[k]);
                acc(grads, *b, &|k| -gy[k]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(grads, *a, &|k| gy[k] * bd[k]);
                acc(grads, *b, &|k| gy[k] * ad[k]);
            }
            Op::Scale(a, f) => acc(grads, *a, &|k| gy[k] * f),
            Op::Sigmoid(a) => acc(grads, *a, &|k| gy[k] * y[k] * (1.0 - y[k])),
            Op::Tanh(a) => acc(grads, *a, &|k| gy[k] * (1.0 - y[k] * y[k])),
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(grads, *a, &|k| gy[k] * gelu_grad(x[k]));
            }
            Op::Silu(a) => {
                let x = self.data(*a);
                acc(grads, *a, &|k| {
                    let s = sigmoid(x[k]);
                    gy[k] * s * (1.0 + x[k] * (1.0 - s))
                });
            }
            Op::Cos(a) => {
                let x = self.data(*a);
                acc(grads, *a, &|k| -gy[k] * x[k].sin());
            }
            Op::Expand { x, axis, size } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                if self.ng(*x) {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; outer * inner]);
                    for o in 0..outer {
                        for s in 0..*size {
                            let src = &gy[(o * size + s) * inner..][..inner];
                            for (d, g) in slot[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = gy.len() / width;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.ng(p) {
                        let slot = grads[p.0].get_or_insert_with(|| vec![0.0; rows * w]);
                        for r in 0..rows {
                            let src = &gy[r * width + offset..][..w];
                            for (d, g) in slot[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Narrow { x, start, len } => {
                let w = self.value(*x).last_dim();
                let rows = gy.len() / len;
                if self.ng(*x) {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; rows * w]);
                    for r in 0..rows {
                        for c in 0..*len {
                            slot[r * w + start + c] += gy[r * len + c];
                        }
                    }
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                if self.ng(*x) {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; outer * dim * inner]);
                    for o in 0..outer {
                        let base = (o * dim + index) * inner;
                        for c in 0..inner {
                            slot[base + c] += gy[o * inner + c];
                        }
                    }
                }
            }
            Op::Stack { parts, axis } => {
                let ps = self.shape(parts[0]);
                let outer: usize = ps[..*axis].iter().product();
                let inner: usize = ps[*axis..].iter().product();
                let n = parts.len();
                for (s, &p) in parts.iter().enumerate() {
                    if !self.ng(p) {
                        continue;
                    }
                    let slot = grads[p.0].get_or_insert_with(|| vec![0.0; outer * inner]);
                    for o in 0..outer {
                        let src = &gy[(o * n + s) * inner..][..inner];
                        for (d, g) in slot[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc(grads, *x, &|k| gy[k]),
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            } => self.conv_backward(*x, *kernel, *bias, *dilation, gy, grads),
            Op::Gather { table, indices } => {
                if self.ng(*table) {
                    let d = self.value(*table).last_dim();
                    let n = self.value(*table).numel();
                    let slot = grads[table.0].get_or_insert_with(|| vec![0.0; n]);
                    for (r, &row) in indices.iter().enumerate() {
                        for c in 0..d {
                            slot[row * d + c] += gy[r * d + c];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).last_dim();
                let scale = gy[0] / labels.len() as f64;
                acc(grads, *logits, &|k| {
                    let onehot = if labels[k / classes] == k % classes { 1.0 } else { 0.0 };
                    scale * (probs[k] - onehot)
                });
            }
            Op::SumSquares(x) => {
                let xd = self.data(*x);
                acc(grads, *x, &|k| 2.0 * gy[0] * xd[k]);
            }
            Op::Sum(x) => acc(grads, *x, &|_| gy[0]),
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ks = self.shape(kernel);
        let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
        let xs = self.shape(x);
        let len = xs[xs.len() - 2];
        let batch = self.value(x).numel() / (len * c_in);
        let half = (k - 1) / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);

        let mut dx = self.ng(x).then(|| vec![0.0; xd.len()]);
        let mut dk = self.ng(kernel).then(|| vec![0.0; kd.len()]);
        for b in 0..batch {
            for i in 0..len {
                let grow = &gy[(b * len + i) * c_out..][..c_out];
                for r in 0..k {
                    let src = i as isize + (r as isize - half as isize) * dilation as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xoff = (b * len + src as usize) * c_in;
                    for (o, &g) in grow.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        for j in 0..c_in {
                            let kidx = (o * c_in + j) * k + r;
                            if let Some(dx) = dx.as_mut() {
                                dx[xoff + j] += g * kd[kidx];
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[kidx] += g * xd[xoff + j];
                            }
                        }
                    }
                }
            }
        }
        let mut add_into = |v: Var, g: Vec<f64>| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, d) in slot.iter_mut().zip(g) {
                *s += d;
            }
        };
        if let Some(dx) = dx {
            add_into(x, dx);
        }
        if let Some(dk) = dk {
            add_into(kernel, dk);
        }
        if let Some(b) = bias {
            if self.ng(b) {
                let mut db = vec![0.0; c_out];
                for row in gy.chunks(c_out) {
                    for (s, g) in db.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                add_into(b, db);
            }
        }
    }
}

/// Row-wise softmax of a flat `[rows, classes]` buffer.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= z;
        }
    }
    out
}
