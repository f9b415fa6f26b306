//! Training objective, AdamW optimizer and the epoch loop.
//!
//! `L = L1 + L2 + L3 (+ L4 via decoupled weight decay)`, estimated with one
//! diffusion level and one noise draw per window per step.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoisingModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig, MetricsReport};
use crate::eventdata::PredictionWindow;
use crate::numeric::{Graph, ParameterStore, Tensor, Var};
use crate::rng;
use crate::seqmap::{self, RoundingNetwork};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

/// `‖x⁰ − x̂⁰‖²`; at `n = 1` the mark blocks of the target are the
/// noiseless rows `EMB(m)` while time blocks stay `x^time`.
pub fn loss_l1(x0: &[f64], n: usize, x0_hat: &[f64], marks: &[usize], table: &Tensor) -> Result<f64> {
    let d = table.shape()[1];
    if x0.len() != x0_hat.len() || x0.len() != marks.len() * (d + 1) {
        return Err(Error::dim(
            "loss_l1",
            format!("{} / {} values for {} events", x0.len(), x0_hat.len(), marks.len()),
        ));
    }
    let mut target = x0.to_vec();
    if n == 1 {
        for (block, &m) in target.chunks_mut(d + 1).zip(marks) {
            if m >= table.shape()[0] {
                return Err(Error::Index(format!("mark {m} out of range")));
            }
            block[1..].copy_from_slice(&table.data()[m * d..(m + 1) * d]);
        }
    }
    Ok(target.iter().zip(x0_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean cross-entropy of the rounding network on `x_mark` (`[events · d]`).
pub fn loss_l2(store: &ParameterStore, net: &RoundingNetwork, x_mark: &[f64], marks: &[usize]) -> Result<f64> {
    if marks.is_empty() || !x_mark.len().is_multiple_of(marks.len()) {
        return Err(Error::dim(
            "loss_l2",
            format!("{} values for {} marks", x_mark.len(), marks.len()),
        ));
    }
    let d = x_mark.len() / marks.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![marks.len(), d], x_mark.to_vec())?);
    let logits = net.logits(&mut g, store, x)?;
    let ce = g.softmax_cross_entropy(logits, marks)?;
    Ok(g.value(ce).item())
}

/// `ᾱ_N ‖x⁰‖²`.
pub fn loss_l3(x0: &[f64], schedule: &NoiseSchedule) -> f64 {
    schedule.alpha_bar(schedule.steps()) * x0.iter().map(|v| v * v).sum::<f64>()
}

/// `(wd / 2) Σ ‖W‖²` over decayed tensors: the penalty that decoupled
/// weight decay stands in for. Reported only.
pub fn weight_penalty(store: &ParameterStore, weight_decay: f64) -> f64 {
    0.5 * weight_decay
        * store
            .entries()
            .iter()
            .filter(|e| e.decay && e.trainable)
            .map(|e| e.value.squared_norm())
            .sum::<f64>()
}

/// Random inputs of one objective evaluation for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDraw {
    pub level: usize,
    /// Standard-normal mark reparameterization noise, `L' · d`.
    pub mark_noise: Vec<f64>,
    /// Standard-normal diffusion noise, `L'(d + 1)`.
    pub diffusion_noise: Vec<f64>,
}

impl WindowDraw {
    pub fn sample<R: Rng + ?Sized>(steps: usize, target_len: usize, d: usize, rng: &mut R) -> Self {
        let level = rng.gen_range(1..=steps);
        let mut normal = |k: usize| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let mark_noise = normal(target_len * d);
        let diffusion_noise = normal(target_len * (d + 1));
        Self {
            level,
            mark_noise,
            diffusion_noise,
        }
    }
}

/// Graph handles of the three differentiable loss terms (each a per-window
/// mean, except L2 which is a per-event mean) and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
}

/// Builds the objective for a batch of windows with the given draws.
pub fn objective_graph(
    net: &Denoiser,
    g: &mut Graph,
    store: &ParameterStore,
    schedule: &NoiseSchedule,
    windows: &[PredictionWindow],
    draws: &[WindowDraw],
    l3_weight: f64,
) -> Result<Objective> {
    let cfg = net.config();
    let (b, lp, d) = (windows.len(), cfg.target_len, cfg.mark_dim);
    if b == 0 || draws.len() != b {
        return Err(Error::dim("objective", format!("{b} windows, {} draws", draws.len())));
    }
    let mut marks = Vec::with_capacity(b * lp);
    let mut x_time = Vec::with_capacity(b * lp);
    let mut noise = Vec::with_capacity(b * lp * d);
    let mut target_noise = Vec::with_capacity(b * lp * d);
    let mut keep = Vec::with_capacity(b * lp * (d + 1));
    let mut eps = Vec::with_capacity(b * lp * (d + 1));
    for (w, dr) in windows.iter().zip(draws) {
        if w.target.len() != lp {
            return Err(Error::Contract(format!(
                "target has {} events, expected {lp}",
                w.target.len()
            )));
        }
        if dr.level == 0 || dr.level > schedule.steps() {
            return Err(Error::Index(format!(
                "diffusion level {} outside 1..={}",
                dr.level,
                schedule.steps()
            )));
        }
        marks.extend_from_slice(&w.target.marks);
        x_time.extend(seqmap::time_forward(&w.target.times, w.anchor)?);
        noise.extend_from_slice(&dr.mark_noise);
        if dr.level == 1 {
            target_noise.extend(std::iter::repeat_n(0.0, dr.mark_noise.len()));
        } else {
            target_noise.extend_from_slice(&dr.mark_noise);
        }
        let (a, s) = (
            schedule.alpha_bar(dr.level).sqrt(),
            (1.0 - schedule.alpha_bar(dr.level)).sqrt(),
        );
        keep.extend(std::iter::repeat_n(a, lp * (d + 1)));
        eps.extend(dr.diffusion_noise.iter().map(|e| s * e));
    }
    if noise.len() != b * lp * d || eps.len() != b * lp * (d + 1) {
        return Err(Error::dim("objective", "noise draws do not match the model shape"));
    }
    let shape3 = |w: usize| vec![b, lp, w];
    let t = g.constant(Tensor::new(shape3(1), x_time)?);
    let x_mark = net.phi.embed_graph(g, store, &marks, Some(&noise))?;
    let x_mark3 = g.reshape(x_mark, &shape3(d))?;
    let x0 = g.concat(&[t, x_mark3])?;

    let keep = g.constant(Tensor::new(shape3(d + 1), keep)?);
    let eps = g.constant(Tensor::new(shape3(d + 1), eps)?);
    let scaled = g.mul(x0, keep)?;
    let x_n = g.add(scaled, eps)?;

    let h = net.encode_graph(g, store, windows)?;
    let levels: Vec<usize> = draws.iter().map(|dr| dr.level).collect();
    let x0_hat = net.denoise_graph(g, store, x_n, &levels, h)?;

    let tm = net.phi.embed_graph(g, store, &marks, Some(&target_noise))?;
    let tm = g.reshape(tm, &shape3(d))?;
    let target = g.concat(&[t, tm])?;
    let diff = g.sub(target, x0_hat)?;
    let l1 = g.sum_squares(diff);
    let l1 = g.scale(l1, 1.0 / b as f64);

    let logits = net.rounding.logits(g, store, x_mark)?;
    let l2 = g.softmax_cross_entropy(logits, &marks)?;

    let l3 = g.sum_squares(x0);
    let l3 = g.scale(l3, schedule.alpha_bar(schedule.steps()) / b as f64);

    let sum = g.add(l1, l2)?;
    let weighted = g.scale(l3, l3_weight);
    let total = g.add(sum, weighted)?;
    Ok(Objective { l1, l2, l3, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr0: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, lr0: f64, gamma: f64, weight_decay: f64) -> Result<Self> {
        if !(lr0 > 0.0) || !(gamma > 0.0 && gamma <= 1.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need lr > 0, 0 < gamma <= 1, weight decay >= 0; got {lr0}, {gamma}, {weight_decay}"
            )));
        }
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Ok(Self {
            lr0,
            gamma,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// `lr₀ · γ^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.gamma.powi(epoch as i32)
    }

    pub fn check_shapes(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.first.len() == store.len()
            && self.second.len() == store.len()
            && store
                .entries()
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(e, (m, v))| m.len() == e.value.numel() && v.len() == e.value.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::dim("optimizer", "moment buffers do not match the parameters"))
        }
    }

    /// One AdamW update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        self.check_shapes(store)?;
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let entry = store.entry(id);
            if !entry.trainable {
                continue;
            }
            let decay = if entry.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let grad = entry.grad.data().to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, p) in store.value_mut(id).iter_mut().enumerate() {
                let gk = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                *p *= decay;
                *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without a better validation score.
    pub patience: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// 0 disables L3.
    pub l3_weight: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// At most this many validation windows are sampled.
    pub val_limit: usize,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn new(seed: u64, clamp_start: usize) -> Self {
        Self {
            lr0: 1e-3,
            gamma: 0.98,
            weight_decay: 0.0,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            max_steps: None,
            l3_weight: 1.0,
            seed,
            val_every: 1,
            val_limit: 256,
            eval: EvalConfig::new(clamp_start, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.val_every == 0 || self.val_limit == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, val_every and val_limit must be positive".into(),
            ));
        }
        if !(self.l3_weight >= 0.0) {
            return Err(Error::Config("l3_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One optimization step over a batch. Draws come from streams keyed by
/// `(epoch, batch, position)`. On a non-finite forward or backward value
/// the step is aborted and neither parameters nor optimizer state change.
pub fn train_step(
    model: &mut DenoisingModel,
    opt: &mut OptimizerState,
    schedule: &NoiseSchedule,
    windows: &[PredictionWindow],
    config: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<LossBreakdown> {
    let cfg = model.config();
    let draws: Vec<WindowDraw> = (0..windows.len())
        .map(|i| {
            let mut r = rng::stream(config.seed, "train", &[epoch as u64, batch as u64, i as u64]);
            WindowDraw::sample(schedule.steps(), cfg.target_len, cfg.mark_dim, &mut r)
        })
        .collect();
    apply_step(
        model,
        opt,
        schedule,
        windows,
        &draws,
        config.l3_weight,
        opt.lr_at(epoch),
    )
}

/// Step with explicit draws and learning rate.
pub fn apply_step(
    model: &mut DenoisingModel,
    opt: &mut OptimizerState,
    schedule: &NoiseSchedule,
    windows: &[PredictionWindow],
    draws: &[WindowDraw],
    l3_weight: f64,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let obj = objective_graph(&model.net, &mut g, &model.store, schedule, windows, draws, l3_weight)?;
    g.check_finite()?;
    model.store.zero_grad();
    g.backward(obj.total, &mut model.store)?;
    let l4 = weight_penalty(&model.store, opt.weight_decay);
    let (l1, l2, l3) = (
        g.value(obj.l1).item(),
        g.value(obj.l2).item(),
        l3_weight * g.value(obj.l3).item(),
    );
    opt.update(&mut model.store, lr)?;
    Ok(LossBreakdown {
        l1,
        l2,
        l3,
        l4,
        total: l1 + l2 + l3 + l4,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub loss: LossBreakdown,
    pub val: Option<MetricsReport>,
    pub score: Option<f64>,
}

pub fn write_log_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,lr,l1,l2,l3,l4,total,val_mae,val_acc")?;
    for e in logs {
        let (mae, acc) = e.val.as_ref().map_or((String::new(), String::new()), |v| {
            (v.mae.to_string(), v.acc.to_string())
        });
        writeln!(
            f,
            "{},{},{},{},{},{},{},{mae},{acc}",
            e.epoch, e.lr, e.loss.l1, e.loss.l2, e.loss.l3, e.loss.l4, e.loss.total
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Validation score, lower is better: `(1 − ACC) + MAE / MAE_base`, where
/// `MAE_base` is the mean-interval baseline's MAE on the same windows.
pub fn validation_score(report: &MetricsReport, baseline_mae: f64) -> f64 {
    (1.0 - report.acc) + report.mae / baseline_mae.max(1e-12)
}

/// State carried across epochs, enough to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DenoisingModel,
    pub opt: OptimizerState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub score: f64,
    pub metrics: MetricsReport,
    pub store: ParameterStore,
}

impl TrainState {
    pub fn new(model: DenoisingModel, config: &TrainConfig) -> Result<Self> {
        let opt = OptimizerState::new(&model.store, config.lr0, config.gamma, config.weight_decay)?;
        Ok(Self {
            model,
            opt,
            epoch: 0,
            best: None,
            logs: Vec::new(),
        })
    }

    /// The model with the best validation parameters (or the current ones
    /// when no validation has run).
    pub fn best_model(&self) -> DenoisingModel {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.store = b.store.clone();
        }
        m
    }
}

/// Runs epochs of shuffled mini-batches with `lr₀ γ^epoch`, validating and
/// keeping the best parameters; stops on patience, `max_epochs` or
/// `max_steps`. `on_epoch` sees each finished epoch.
pub fn train_loop<F>(
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    train: &[PredictionWindow],
    val: &[PredictionWindow],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split has no windows".into()));
    }
    let val = &val[..val.len().min(config.val_limit)];
    let baseline_mae = evaluation::naive_baselines(val)?.mean_interval.mae;
    let mut order: Vec<usize> = (0..train.len()).collect();
    while state.epoch < config.max_epochs {
        let epoch = state.epoch;
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", &[epoch as u64]));
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        let mut capped = false;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps.is_some_and(|m| state.opt.step >= m) {
                capped = true;
                break;
            }
            let batch: Vec<PredictionWindow> = chunk.iter().map(|&i| train[i].clone()).collect();
            let l = train_step(&mut state.model, &mut state.opt, schedule, &batch, config, epoch, bi)?;
            sum.l1 += l.l1;
            sum.l2 += l.l2;
            sum.l3 += l.l3;
            sum.l4 += l.l4;
            sum.total += l.total;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let k = batches as f64;
        let mean = LossBreakdown {
            l1: sum.l1 / k,
            l2: sum.l2 / k,
            l3: sum.l3 / k,
            l4: sum.l4 / k,
            total: sum.total / k,
        };
        let capped = capped || config.max_steps.is_some_and(|m| state.opt.step >= m);
        let last = capped || epoch + 1 == config.max_epochs;
        let (report, score) = if (epoch + 1).is_multiple_of(config.val_every) || last {
            let r = evaluation::evaluate(&state.model, schedule, val, &config.eval)?;
            let s = validation_score(&r, baseline_mae);
            (Some(r), Some(s))
        } else {
            (None, None)
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (l1 {:.4}, l2 {:.4}, l3 {:.4}){}",
            mean.total,
            mean.l1,
            mean.l2,
            mean.l3,
            report
                .as_ref()
                .map_or(String::new(), |r| format!(", val mae {:.4} acc {:.4}", r.mae, r.acc))
        );
        if let (Some(r), Some(s)) = (&report, score) {
            if state.best.as_ref().is_none_or(|b| s < b.score) {
                state.best = Some(BestSnapshot {
                    epoch,
                    score: s,
                    metrics: r.clone(),
                    store: state.model.store.clone(),
                });
            }
        }
        state.logs.push(EpochLog {
            epoch,
            lr: state.opt.lr_at(epoch),
            steps: state.opt.step,
            loss: mean,
            val: report,
            score,
        });
        state.epoch += 1;
        on_epoch(state)?;
        let stale = score.is_some() && state.best.as_ref().is_some_and(|b| epoch - b.epoch >= config.patience);
        if capped || stale {
            break;
        }
    }
    Ok(())
}
