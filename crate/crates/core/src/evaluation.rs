//! Multi-step MAE / ACC with positional alignment, per-step curves and
//! naive baselines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoisingModel;
use crate::diffusion::{self, NoiseSchedule, ReverseConfig, SampledWindow};
use crate::error::{Error, Result};
use crate::eventdata::{EventSequence, PredictionWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute arrival-time error over all predicted events.
    pub mae: f64,
    pub acc: f64,
    pub per_step_mae: Vec<f64>,
    pub per_step_acc: Vec<f64>,
    pub n_windows: usize,
    /// `mae` in raw time units, when a dataset scale is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step_mae_raw: Option<Vec<f64>>,
}

impl MetricsReport {
    /// Adds raw-unit MAE using the normalization factor `T_max / 100`.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.mae_raw = Some(self.mae * scale);
        self.per_step_mae_raw = Some(self.per_step_mae.iter().map(|m| m * scale).collect());
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `step,mae,acc` with 1-based steps.
    pub fn write_per_step_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,mae,acc")?;
        for (i, (m, a)) in self.per_step_mae.iter().zip(&self.per_step_acc).enumerate() {
            writeln!(f, "{},{m},{a}", i + 1)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Scores predictions against window targets position by position.
pub fn score(predictions: &[EventSequence], windows: &[PredictionWindow]) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Validation("nothing to evaluate: no test windows".into()));
    }
    if predictions.len() != windows.len() {
        return Err(Error::dim(
            "score",
            format!("{} predictions for {} windows", predictions.len(), windows.len()),
        ));
    }
    let steps = windows[0].target.len();
    let mut abs = vec![0.0; steps];
    let mut hits = vec![0usize; steps];
    for (p, w) in predictions.iter().zip(windows) {
        if p.len() != steps || w.target.len() != steps {
            return Err(Error::dim(
                "score",
                format!(
                    "prediction length {} / target length {} vs {steps}",
                    p.len(),
                    w.target.len()
                ),
            ));
        }
        for i in 0..steps {
            abs[i] += (p.times[i] - w.target.times[i]).abs();
            hits[i] += usize::from(p.marks[i] == w.target.marks[i]);
        }
    }
    let n = windows.len() as f64;
    let per_step_mae: Vec<f64> = abs.iter().map(|a| a / n).collect();
    let per_step_acc: Vec<f64> = hits.iter().map(|&h| h as f64 / n).collect();
    Ok(MetricsReport {
        mae: abs.iter().sum::<f64>() / (n * steps as f64),
        acc: hits.iter().sum::<usize>() as f64 / (n * steps as f64),
        per_step_mae,
        per_step_acc,
        n_windows: windows.len(),
        mae_raw: None,
        per_step_mae_raw: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub reverse: ReverseConfig,
    /// Samples per window; above 1, times are averaged and marks voted.
    pub samples: usize,
    /// Windows sampled together in one reverse pass.
    pub chunk: usize,
}

impl EvalConfig {
    pub fn new(clamp_start: usize, seed: u64) -> Self {
        Self {
            reverse: ReverseConfig { clamp_start, seed },
            samples: 1,
            chunk: 256,
        }
    }
}

/// Point predictions for each window.
pub fn predict(
    model: &DenoisingModel,
    schedule: &NoiseSchedule,
    windows: &[PredictionWindow],
    config: &EvalConfig,
) -> Result<Vec<SampledWindow>> {
    if config.samples == 0 || config.chunk == 0 {
        return Err(Error::Config("samples and chunk must be positive".into()));
    }
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(config.chunk) {
        let draws = (0..config.samples as u64)
            .map(|s| diffusion::sample(model, schedule, chunk, &config.reverse, s))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..chunk.len() {
            let picks: Vec<&SampledWindow> = draws.iter().map(|d| &d[i]).collect();
            out.push(aggregate(&picks, model.config().num_marks));
        }
    }
    Ok(out)
}

fn aggregate(draws: &[&SampledWindow], num_marks: usize) -> SampledWindow {
    if draws.len() == 1 {
        return draws[0].clone();
    }
    let len = draws[0].sequence.len();
    let s = draws.len() as f64;
    let times = (0..len)
        .map(|i| draws.iter().map(|d| d.sequence.times[i]).sum::<f64>() / s)
        .collect();
    let marks = (0..len)
        .map(|i| {
            let mut votes = vec![0usize; num_marks];
            for d in draws {
                votes[d.sequence.marks[i]] += 1;
            }
            majority(&votes)
        })
        .collect();
    SampledWindow {
        sequence: EventSequence { marks, times },
        clipped: draws.iter().map(|d| d.clipped).sum(),
    }
}

/// Largest count, lowest index on ties.
fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    model: &DenoisingModel,
    schedule: &NoiseSchedule,
    windows: &[PredictionWindow],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Validation("nothing to evaluate: no test windows".into()));
    }
    let preds: Vec<EventSequence> = predict(model, schedule, windows, config)?
        .into_iter()
        .map(|s| s.sequence)
        .collect();
    score(&preds, windows)
}

/// Most frequent history mark over all windows (lowest index on ties).
pub fn majority_mark(windows: &[PredictionWindow]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for w in windows {
        for &m in &w.history.marks {
            *counts.entry(m).or_default() += 1;
        }
    }
    let k = counts.keys().next_back().map_or(1, |m| m + 1);
    let mut dense = vec![0; k];
    for (m, c) in counts {
        dense[m] = c;
    }
    majority(&dense)
}

fn mean_gap(history: &EventSequence) -> f64 {
    let n = history.len();
    if n < 2 {
        return 0.0;
    }
    (history.times[n - 1] - history.times[0]) / (n - 1) as f64
}

fn last_gap(history: &EventSequence) -> f64 {
    let n = history.len();
    if n < 2 {
        return 0.0;
    }
    history.times[n - 1] - history.times[n - 2]
}

/// Mean-interval baseline: each window's future extends its mean history
/// gap, every mark is the pooled majority class.
pub fn mean_interval_predictions(windows: &[PredictionWindow]) -> Vec<EventSequence> {
    let major = majority_mark(windows);
    windows
        .iter()
        .map(|w| {
            let gap = mean_gap(&w.history);
            let steps = w.target.len();
            EventSequence {
                marks: vec![major; steps],
                times: (1..=steps).map(|i| w.anchor + gap * i as f64).collect(),
            }
        })
        .collect()
}

/// Last-interval baseline: repeat the last gap and the last mark.
pub fn last_interval_predictions(windows: &[PredictionWindow]) -> Vec<EventSequence> {
    windows
        .iter()
        .map(|w| {
            let gap = last_gap(&w.history);
            let steps = w.target.len();
            EventSequence {
                marks: vec![*w.history.marks.last().unwrap_or(&0); steps],
                times: (1..=steps).map(|i| w.anchor + gap * i as f64).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReports {
    pub mean_interval: MetricsReport,
    pub last_interval: MetricsReport,
}

pub fn naive_baselines(windows: &[PredictionWindow]) -> Result<BaselineReports> {
    Ok(BaselineReports {
        mean_interval: score(&mean_interval_predictions(windows), windows)?,
        last_interval: score(&last_interval_predictions(windows), windows)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mae: f64,
    pub acc: f64,
}

/// Metrics over the first `s` predicted events for each requested `s`.
pub fn horizon_curve(report: &MetricsReport, steps: &[usize]) -> Result<Vec<HorizonRow>> {
    let max = report.per_step_mae.len();
    steps
        .iter()
        .map(|&s| {
            if s == 0 || s > max {
                return Err(Error::Config(format!(
                    "horizon {s} outside 1..={max} of the trained model"
                )));
            }
            Ok(HorizonRow {
                horizon: s,
                mae: report.per_step_mae[..s].iter().sum::<f64>() / s as f64,
                acc: report.per_step_acc[..s].iter().sum::<f64>() / s as f64,
            })
        })
        .collect()
}

pub fn write_horizon_csv(rows: &[HorizonRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "horizon,mae,acc")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.horizon, r.mae, r.acc)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn window(history: EventSequence, target: EventSequence) -> PredictionWindow {
        let anchor = *history.times.last().unwrap();
        PredictionWindow {
            history,
            target,
            anchor,
        }
    }

    fn seq(marks: &[usize], times: &[f64]) -> EventSequence {
        EventSequence {
            marks: marks.to_vec(),
            times: times.to_vec(),
        }
    }

    #[test]
    fn mae_example() {
        let w = window(seq(&[0], &[0.5]), seq(&[1, 0], &[1.5, 2.5]));
        let r = score(&[seq(&[1, 0], &[1.0, 2.0])], &[w]).unwrap();
        assert_relative_eq!(r.mae, 0.5);
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.per_step_acc, vec![1.0, 1.0]);
        let raw = r.with_scale(3.0);
        assert_relative_eq!(raw.mae_raw.unwrap(), 1.5);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(score(&[], &[]).is_err());
    }

    #[test]
    fn mean_interval_baseline_with_unit_gaps() {
        let w = window(seq(&[2, 2, 1], &[1.0, 2.0, 3.0]), seq(&[0, 0, 0], &[4.0, 5.0, 7.0]));
        let p = &mean_interval_predictions(std::slice::from_ref(&w))[0];
        assert_eq!(p.times, vec![4.0, 5.0, 6.0]);
        assert_eq!(p.marks, vec![2, 2, 2]);
        let l = &last_interval_predictions(&[w])[0];
        assert_eq!(l.marks, vec![1, 1, 1]);
    }

    #[test]
    fn single_mark_dataset_baseline_is_exact() {
        let ws: Vec<_> = (0..5)
            .map(|i| window(seq(&[0; 3], &[1.0, 2.0, 3.0 + i as f64]), seq(&[0; 2], &[5.0, 9.0])))
            .collect();
        let b = naive_baselines(&ws).unwrap();
        assert_eq!(b.mean_interval.acc, 1.0);
        assert_eq!(b.last_interval.acc, 1.0);
    }

    #[test]
    fn uniform_random_marks_score_one_over_k() {
        let mut r = rng::stream(0, "uniform", &[]);
        let k = 4;
        let ws: Vec<_> = (0..20_000)
            .map(|_| window(seq(&[0], &[0.0]), seq(&[r.gen_range(0..k)], &[1.0])))
            .collect();
        let preds: Vec<_> = (0..ws.len()).map(|_| seq(&[r.gen_range(0..k)], &[1.0])).collect();
        let acc = score(&preds, &ws).unwrap().acc;
        // 3 standard errors of a Bernoulli(1/4) mean
        assert!((acc - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / 20_000.0).sqrt(), "{acc}");
    }

    #[test]
    fn horizon_is_prefix_mean() {
        let report = MetricsReport {
            mae: 2.0,
            acc: 0.5,
            per_step_mae: vec![1.0, 2.0, 3.0],
            per_step_acc: vec![1.0, 0.5, 0.0],
            n_windows: 1,
            mae_raw: None,
            per_step_mae_raw: None,
        };
        let rows = horizon_curve(&report, &[1, 3]).unwrap();
        assert_eq!(
            rows[0],
            HorizonRow {
                horizon: 1,
                mae: 1.0,
                acc: 1.0
            }
        );
        assert_eq!(rows[1].mae, 2.0);
        assert!(matches!(horizon_curve(&report, &[4]), Err(Error::Config(_))));
    }

    #[test]
    fn score_is_permutation_invariant() {
        let mut r = rng::stream(1, "perm", &[]);
        let mk = |r: &mut rng::Rng| {
            seq(
                &[r.gen_range(0..3), r.gen_range(0..3)],
                &[r.gen_range(0.0..1.0), r.gen_range(1.0..2.0)],
            )
        };
        let ws: Vec<_> = (0..7).map(|_| window(seq(&[0], &[0.0]), mk(&mut r))).collect();
        let ps: Vec<_> = (0..7).map(|_| mk(&mut r)).collect();
        let a = score(&ps, &ws).unwrap();
        let (mut ws2, mut ps2) = (ws.clone(), ps.clone());
        ws2.reverse();
        ps2.reverse();
        let b = score(&ps2, &ws2).unwrap();
        assert_relative_eq!(a.mae, b.mae, epsilon = 1e-12);
        assert_eq!(a.acc, b.acc);
    }

    #[test]
    fn vote_and_average() {
        let mk = |m: usize, t: f64| SampledWindow {
            sequence: seq(&[m], &[t]),
            clipped: 0,
        };
        let (a, b, c) = (mk(2, 1.0), mk(1, 2.0), mk(2, 3.0));
        let agg = aggregate(&[&a, &b, &c], 3);
        assert_eq!(agg.sequence.marks, vec![2]);
        assert_relative_eq!(agg.sequence.times[0], 2.0);
        assert_eq!(majority(&[1, 3, 3]), 1);
    }
}
