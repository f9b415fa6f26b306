//! Event sequences, JSONL ingestion, time normalization, windowing and a
//! multivariate Hawkes generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Normalized times live in (0, NORMALIZED_MAX].
pub const NORMALIZED_MAX: f64 = 100.0;

/// Marked events with strictly increasing, positive arrival times.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub marks: Vec<usize>,
    pub times: Vec<f64>,
}

impl EventSequence {
    pub fn new(marks: Vec<usize>, times: Vec<f64>) -> Result<Self> {
        let s = Self { marks, times };
        s.validate(None)?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Checks the sequence invariants; `num_marks` additionally bounds marks.
    pub fn validate(&self, num_marks: Option<usize>) -> Result<()> {
        if self.marks.len() != self.times.len() {
            return Err(Error::Validation(format!(
                "{} marks vs {} times",
                self.marks.len(),
                self.times.len()
            )));
        }
        for (i, &t) in self.times.iter().enumerate() {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::Validation(format!("time {t} at index {i} is not positive")));
            }
            if i > 0 && t <= self.times[i - 1] {
                return Err(Error::Validation(format!("non-increasing at index {i}")));
            }
        }
        if let Some(k) = num_marks {
            if let Some(i) = self.marks.iter().position(|&m| m >= k) {
                return Err(Error::Validation(format!(
                    "mark {} at index {i} exceeds declared K={k}",
                    self.marks[i]
                )));
            }
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, len: usize) -> EventSequence {
        EventSequence {
            marks: self.marks[start..start + len].to_vec(),
            times: self.times[start..start + len].to_vec(),
        }
    }
}

/// History of `L` events, the `L'` events that follow, and the last
/// history time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub history: EventSequence,
    pub target: EventSequence,
    pub anchor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_marks: usize,
    /// Raw time units per normalized unit (T_max / 100); 1 when the data
    /// were never rescaled.
    pub time_scale: f64,
    pub splits: Splits,
    pub source: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if !(m.time_scale > 0.0) {
            return Err(Error::Validation(format!(
                "manifest scale {} must be positive",
                m.time_scale
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in m.splits.train.iter().chain(&m.splits.val).chain(&m.splits.test) {
            if !seen.insert(i) {
                return Err(Error::Validation(format!("sequence {i} appears in two splits")));
            }
        }
        Ok(m)
    }
}

#[derive(Deserialize)]
struct Record {
    marks: Vec<usize>,
    times: Vec<f64>,
}

/// Reads one sequence per line. An optional first line `{"K": n}` declares
/// the number of marks; otherwise K is one past the largest mark seen.
pub fn load_jsonl(path: &Path, declared_k: Option<usize>) -> Result<(Vec<EventSequence>, DatasetManifest)> {
    let reader = BufReader::new(File::open(path)?);
    let mut declared = declared_k;
    let mut sequences = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Validation(format!("line {}: {e}", lineno + 1)))?;
        if value.get("marks").is_none() {
            if let Some(k) = value.get("K").and_then(|v| v.as_u64()) {
                if sequences.is_empty() {
                    declared = declared.or(Some(k as usize));
                    continue;
                }
            }
        }
        let rec: Record =
            serde_json::from_value(value).map_err(|e| Error::Validation(format!("line {}: {e}", lineno + 1)))?;
        let seq = EventSequence {
            marks: rec.marks,
            times: rec.times,
        };
        seq.validate(declared)
            .map_err(|e| Error::Validation(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        sequences.push(seq);
    }
    let inferred = sequences.iter().flat_map(|s| s.marks.iter()).max().map_or(0, |m| m + 1);
    let num_marks = declared.unwrap_or(inferred).max(inferred);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = DatasetManifest {
        name,
        num_marks,
        time_scale: 1.0,
        splits: Splits::default(),
        source: path.display().to_string(),
    };
    Ok((sequences, manifest))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Validation(msg) => msg.clone(),
        other => other.to_string(),
    }
}

/// Writes sequences as JSONL, preceded by a `{"K": n}` header line when
/// `num_marks` is given.
pub fn write_jsonl(path: &Path, sequences: &[EventSequence], num_marks: Option<usize>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    if let Some(k) = num_marks {
        writeln!(f, "{}", serde_json::json!({ "K": k }))?;
    }
    for s in sequences {
        serde_json::to_writer(&mut f, s)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Rescales every time by 100 / T_max over the whole corpus, so the latest
/// event lands exactly on 100. Returns T_max / 100, the factor converting
/// normalized units back to raw ones.
pub fn normalize_times(sequences: &mut [EventSequence]) -> Result<f64> {
    let t_max = sequences
        .iter()
        .filter_map(|s| s.times.last().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if !t_max.is_finite() {
        return Err(Error::Validation("cannot normalize an empty corpus".into()));
    }
    if t_max <= 0.0 {
        return Err(Error::Validation(format!("maximum time {t_max} must be positive")));
    }
    let factor = NORMALIZED_MAX / t_max;
    for s in sequences.iter_mut() {
        let holds_max = s.times.last() == Some(&t_max);
        for t in &mut s.times {
            *t *= factor;
        }
        // the corpus maximum maps to 100 exactly despite rounding
        if holds_max {
            *s.times.last_mut().unwrap() = NORMALIZED_MAX;
        }
    }
    Ok(t_max / NORMALIZED_MAX)
}

/// Cuts `(history, target)` windows at offsets `0, stride, 2·stride, …`
/// while `history_len + target_len` events remain.
pub fn make_windows(
    sequence: &EventSequence,
    history_len: usize,
    target_len: usize,
    stride: usize,
) -> Result<Vec<PredictionWindow>> {
    if history_len == 0 || target_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive (L={history_len}, L'={target_len}, stride={stride})"
        )));
    }
    let span = history_len + target_len;
    if sequence.len() < span {
        return Ok(Vec::new());
    }
    Ok((0..=sequence.len() - span)
        .step_by(stride)
        .map(|start| {
            let history = sequence.slice(start, history_len);
            let target = sequence.slice(start + history_len, target_len);
            let anchor = *history.times.last().unwrap();
            PredictionWindow {
                history,
                target,
                anchor,
            }
        })
        .collect())
}

pub fn windows_for(
    sequences: &[EventSequence],
    indices: &[usize],
    history_len: usize,
    target_len: usize,
    stride: usize,
) -> Result<Vec<PredictionWindow>> {
    let mut out = Vec::new();
    for &i in indices {
        let seq = sequences
            .get(i)
            .ok_or_else(|| Error::Index(format!("split refers to missing sequence {i}")))?;
        out.extend(make_windows(seq, history_len, target_len, stride)?);
    }
    Ok(out)
}

/// Seeded 60/20/20 split over whole sequences.
pub fn split_sequences(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", &[]));
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = (n as f64 * 0.2).round() as usize;
    let n_val = n_val.min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Impact kernel `g(t) = amplitude · exp(−decay · t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpKernel {
    pub amplitude: f64,
    pub decay: f64,
}

impl ExpKernel {
    pub const fn new(amplitude: f64, decay: f64) -> Self {
        Self { amplitude, decay }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (-self.decay * t).exp()
    }

    /// ∫₀^∞ g(t) dt.
    pub fn mass(&self) -> f64 {
        if self.amplitude == 0.0 {
            0.0
        } else {
            self.amplitude / self.decay
        }
    }
}

/// The four named kernel shapes sampled for each mark pair of the
/// synthetic benchmark, before excitation scaling.
pub const KERNEL_BANK: [ExpKernel; 4] = [
    ExpKernel::new(0.4, 1.0),
    ExpKernel::new(0.2, 0.5),
    ExpKernel::new(0.6, 2.0),
    ExpKernel::new(0.1, 0.2),
];

/// Multivariate Hawkes process with exponential impact kernels.
///
/// `kernels[j][k]` is the excitation an event of mark `j` adds to the
/// intensity of mark `k`:
/// `λ_k(t) = μ_k + Σ_{t_i < t} g_{m_i, k}(t − t_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesModel {
    pub base_rates: Vec<f64>,
    pub kernels: Vec<Vec<ExpKernel>>,
    pub horizon: f64,
}

impl HawkesModel {
    pub fn num_marks(&self) -> usize {
        self.base_rates.len()
    }

    /// Default excitation scale for `k` marks: keeps every row of the
    /// branching matrix below 0.875 so the process is stationary.
    pub fn default_excitation_scale(k: usize) -> f64 {
        1.75 / k as f64
    }

    /// Draws one bank kernel per ordered mark pair, scaling amplitudes by
    /// `excitation_scale`.
    pub fn synthetic(num_marks: usize, base_rate: f64, horizon: f64, excitation_scale: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "hawkes-kernels", &[]);
        let kernels = (0..num_marks)
            .map(|_| {
                (0..num_marks)
                    .map(|_| {
                        let k = KERNEL_BANK[r.gen_range(0..KERNEL_BANK.len())];
                        ExpKernel::new(k.amplitude * excitation_scale, k.decay)
                    })
                    .collect()
            })
            .collect();
        let model = Self {
            base_rates: vec![base_rate; num_marks],
            kernels,
            horizon,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_marks();
        if k == 0 {
            return Err(Error::Config("Hawkes model needs at least one mark".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon {} must be positive", self.horizon)));
        }
        if self.base_rates.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Config("base rates must be finite and nonnegative".into()));
        }
        if self.base_rates.iter().all(|&m| m == 0.0) {
            return Err(Error::Config("base rates are all zero".into()));
        }
        if self.kernels.len() != k || self.kernels.iter().any(|row| row.len() != k) {
            return Err(Error::Config(format!("kernel matrix must be {k}x{k}")));
        }
        for row in &self.kernels {
            for g in row {
                if !(g.amplitude >= 0.0) || (g.amplitude > 0.0 && !(g.decay > 0.0)) {
                    return Err(Error::Config(format!("kernel {g:?} is not nonnegative and integrable")));
                }
            }
        }
        Ok(())
    }

    /// Stationary per-mark rates `(I − Gᵀ)⁻¹ μ` by fixed-point iteration;
    /// `None` when the branching matrix is not subcritical.
    pub fn stationary_rates(&self) -> Option<Vec<f64>> {
        let k = self.num_marks();
        let mut rates = self.base_rates.clone();
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..k)
                .map(|j| self.base_rates[j] + (0..k).map(|i| rates[i] * self.kernels[i][j].mass()).sum::<f64>())
                .collect();
            let delta: f64 = next.iter().zip(&rates).map(|(a, b)| (a - b).abs()).sum();
            rates = next;
            if delta < 1e-12 {
                return Some(rates);
            }
            if rates.iter().any(|r| !r.is_finite() || *r > 1e12) {
                return None;
            }
        }
        None
    }
}

/// Bookkeeping from the thinning sampler.
#[derive(Clone, Debug, Default)]
pub struct ThinningStats {
    pub proposals: usize,
    pub accepted: usize,
    /// Largest λ(t)/λ̄ seen; must never exceed 1.
    pub max_ratio: f64,
}

/// Simulates one sequence on `[0, horizon]` by Ogata thinning. With
/// decaying kernels the intensity just after the current time bounds it
/// until the next event, so that value serves as λ̄.
pub fn simulate_hawkes<R: Rng + ?Sized>(model: &HawkesModel, rng: &mut R, stats: &mut ThinningStats) -> EventSequence {
    let k = model.num_marks();
    // excitation[j * k + c]: current contribution of mark-j events to λ_c
    let mut excitation = vec![0.0; k * k];
    let mut marks = Vec::new();
    let mut times = Vec::new();
    let mut t = 0.0;
    let intensities = |exc: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| model.base_rates[c] + (0..k).map(|j| exc[j * k + c]).sum::<f64>())
            .collect()
    };
    loop {
        let bound: f64 = intensities(&excitation).iter().sum();
        let gap = Exp::new(bound).expect("positive intensity bound").sample(rng);
        let next = t + gap;
        if next > model.horizon {
            break;
        }
        for j in 0..k {
            for c in 0..k {
                let g = &model.kernels[j][c];
                excitation[j * k + c] *= (-g.decay * gap).exp();
            }
        }
        t = next;
        stats.proposals += 1;
        let lambdas = intensities(&excitation);
        let total: f64 = lambdas.iter().sum();
        let ratio = total / bound;
        assert!(
            ratio <= 1.0 + 1e-12,
            "thinning bound violated: λ(t)={total} > λ̄={bound}"
        );
        stats.max_ratio = stats.max_ratio.max(ratio);
        if rng.gen::<f64>() * bound > total {
            continue;
        }
        if times.last().is_some_and(|&last| t <= last) {
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut mark = k - 1;
        for (c, &l) in lambdas.iter().enumerate() {
            if u < l {
                mark = c;
                break;
            }
            u -= l;
        }
        stats.accepted += 1;
        marks.push(mark);
        times.push(t);
        for c in 0..k {
            excitation[mark * k + c] += model.kernels[mark][c].amplitude;
        }
    }
    EventSequence { marks, times }
}

/// Independent sequences with per-sequence seeds derived from `seed`.
pub fn hawkes_generate(model: &HawkesModel, n_sequences: usize, seed: u64) -> Result<Vec<EventSequence>> {
    model.validate()?;
    Ok((0..n_sequences)
        .map(|i| {
            let mut r = rng::stream(seed, "hawkes", &[i as u64]);
            simulate_hawkes(model, &mut r, &mut ThinningStats::default())
        })
        .collect())
}
